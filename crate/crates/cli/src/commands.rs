use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde_json::json;

use mpq_core::admm::{train_modified_bp, train_quantized, AdmmOutcome};
use mpq_core::corpus::{synthetic_text, Corpus, Vocab};
use mpq_core::model::{cluster_layout, perplexity, ModelSpec};
use mpq_core::nas::search_for_target;
use mpq_core::packio::{round_to_f32, Checkpoint, QuantizedModel, CHECKPOINT_MAGIC, PACKED_MAGIC};
use mpq_core::quant::{check_bits, model_size_bytes, PrecisionAssignment};
use mpq_core::sensitivity::{build_report, PrototypeSet, SensitivityReport};
use mpq_core::solver::{finetune_assignment, solve, Prototype};
use mpq_core::train::pretrain;
use mpq_core::{Error, ParamVector, Result};

use crate::settings::Settings;

fn emit(v: serde_json::Value) {
    println!("{v}");
}

fn with_path(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(with_path(path))
}

/// Training and validation text; without a validation file the last lines are held out.
fn split_texts(s: &Settings) -> Result<(String, String)> {
    let train = read_text(s.require(&s.train_text, "train_text")?)?;
    if let Some(v) = &s.valid_text {
        return Ok((train, read_text(v)?));
    }
    let lines: Vec<&str> = train.lines().filter(|l| !l.trim().is_empty()).collect();
    if lines.len() < 2 {
        return Err(Error::config("training text needs at least two lines to hold out validation data"));
    }
    let held = ((lines.len() as f64 * s.valid_fraction).round() as usize).clamp(1, lines.len() - 1);
    let cut = lines.len() - held;
    Ok((lines[..cut].join("\n"), lines[cut..].join("\n")))
}

fn load_vocab(s: &Settings, expected_hash: u64) -> Result<Vocab> {
    let vocab = Vocab::load(s.require(&s.vocab, "vocab")?)?;
    if vocab.hash() != expected_hash {
        return Err(Error::config(format!(
            "vocabulary hash {:016x} does not match the model's {expected_hash:016x}",
            vocab.hash()
        )));
    }
    Ok(vocab)
}

fn load_corpora(s: &Settings, vocab: &Vocab) -> Result<(Corpus, Corpus)> {
    let mode = s.token_mode()?;
    let (train, valid) = split_texts(s)?;
    Ok((Corpus::from_text(&train, vocab, mode), Corpus::from_text(&valid, vocab, mode)))
}

fn sidecar(out: &Path, what: &str) -> PathBuf {
    let mut name = out.as_os_str().to_owned();
    name.push(format!(".{what}.mpc"));
    PathBuf::from(name)
}

enum ModelFile {
    Packed(QuantizedModel),
    Full(Checkpoint),
}

impl ModelFile {
    fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(with_path(path))?;
        match bytes.get(..4) {
            Some(m) if m == PACKED_MAGIC => Ok(ModelFile::Packed(QuantizedModel::from_bytes(&bytes)?)),
            Some(m) if m == CHECKPOINT_MAGIC => Ok(ModelFile::Full(Checkpoint::from_bytes(&bytes)?)),
            Some(m) => Err(Error::BadMagic([m[0], m[1], m[2], m[3]])),
            None => Err(Error::Truncated(format!("{} has {} bytes", path.display(), bytes.len()))),
        }
    }

    fn spec(&self) -> &ModelSpec {
        match self {
            ModelFile::Packed(m) => &m.spec,
            ModelFile::Full(c) => &c.spec,
        }
    }

    fn vocab_hash(&self) -> u64 {
        match self {
            ModelFile::Packed(m) => m.vocab_hash,
            ModelFile::Full(c) => c.vocab_hash,
        }
    }

    fn params(&self) -> Result<ParamVector> {
        match self {
            ModelFile::Packed(m) => m.to_params(),
            ModelFile::Full(c) => Ok(c.params.clone()),
        }
    }
}

fn load_prototypes(s: &Settings) -> Result<Vec<(PathBuf, QuantizedModel)>> {
    let models = s
        .prototype_paths()?
        .into_iter()
        .map(|p| {
            let bytes = fs::read(&p).map_err(with_path(&p))?;
            QuantizedModel::from_bytes(&bytes).map(|m| (p, m))
        })
        .collect::<Result<Vec<_>>>()?;
    let first = &models[0].1;
    if models.iter().any(|(_, m)| m.spec != first.spec || m.vocab_hash != first.vocab_hash) {
        return Err(Error::config("prototypes disagree on architecture or vocabulary"));
    }
    Ok(models)
}

fn write_out(s: &Settings, contents: &[u8]) -> Result<PathBuf> {
    let out = s.require(&s.out, "out")?.clone();
    fs::write(&out, contents)?;
    Ok(out)
}

fn print_report(outcome: &AdmmOutcome) {
    print!("{}", outcome.report.to_json_lines());
}

pub fn sample_corpus(s: &Settings) -> Result<()> {
    let text = synthetic_text(s.seed, s.sample_lines);
    let out = write_out(s, text.as_bytes())?;
    emit(json!({"event": "sample_corpus", "path": out.display().to_string(), "bytes": text.len(), "lines": s.sample_lines}));
    Ok(())
}

pub fn train(s: &Settings) -> Result<()> {
    let mode = s.token_mode()?;
    let out = s.require(&s.out, "out")?;
    let (train_text, valid_text) = split_texts(s)?;
    let vocab = Vocab::build(&train_text, mode, s.max_vocab, s.min_count)?;
    vocab.save(s.require(&s.vocab, "vocab")?)?;
    let train = Corpus::from_text(&train_text, &vocab, mode);
    let valid = Corpus::from_text(&valid_text, &vocab, mode);
    let spec = s.model_spec(vocab.len())?;
    let (params, logs) = pretrain(&spec, &train, &valid, s.seed, &s.train_config())?;
    for l in &logs {
        emit(json!({"event": "epoch", "epoch": l.epoch, "train_ce": l.train_ce, "val_ppl": l.val_ppl}));
    }
    let ck = Checkpoint { spec, vocab_hash: vocab.hash(), params: round_to_f32(&params) };
    let bytes = ck.save(out)?;
    let ppl = perplexity(&ck.spec, &ck.params, &valid)?;
    emit(json!({
        "event": "checkpoint",
        "path": out.display().to_string(),
        "bytes": bytes,
        "vocab_size": vocab.len(),
        "params": ck.spec.param_count(),
        "val_ppl": ppl,
    }));
    Ok(())
}

pub fn quantize_uniform(s: &Settings) -> Result<()> {
    let out = s.require(&s.out, "out")?;
    let ck = Checkpoint::load(s.require(&s.checkpoint, "checkpoint")?)?;
    let vocab = load_vocab(s, ck.vocab_hash)?;
    let (train, valid) = load_corpora(s, &vocab)?;
    let bits = *s.require(&s.bits, "bits")?;
    check_bits(bits)?;
    let layout = cluster_layout(&ck.spec);
    let assignment = PrecisionAssignment::uniform(&layout, bits);
    let mut cfg = s.admm()?;
    let outcome = match s.quant_method.as_str() {
        "admm" => train_quantized(&ck.spec, &train, &valid, ck.params.clone(), &assignment, &cfg, ck.vocab_hash)?,
        "modbp" => train_modified_bp(&ck.spec, &train, &valid, ck.params.clone(), &assignment, &cfg, ck.vocab_hash)?,
        "offline" => {
            cfg.max_outer = 0;
            train_quantized(&ck.spec, &train, &valid, ck.params.clone(), &assignment, &cfg, ck.vocab_hash)?
        }
        m => return Err(Error::config(format!("unknown quantization method {m:?} (admm|modbp|offline)"))),
    };
    print_report(&outcome);
    let bytes = outcome.model.save(out)?;
    for (what, params) in [("theta", &outcome.state.theta), ("lambda", &outcome.state.lambda)] {
        let c = Checkpoint { spec: ck.spec.clone(), vocab_hash: ck.vocab_hash, params: round_to_f32(params) };
        c.save(&sidecar(out, what))?;
    }
    emit(json!({
        "event": "quantized",
        "path": out.display().to_string(),
        "method": s.quant_method,
        "bits": bits,
        "bytes": bytes,
        "best_k": outcome.report.best_k,
        "val_ppl": outcome.report.best_val_ppl,
    }));
    Ok(())
}

pub fn sensitivity(s: &Settings) -> Result<()> {
    let ck = Checkpoint::load(s.require(&s.checkpoint, "checkpoint")?)?;
    let vocab = load_vocab(s, ck.vocab_hash)?;
    let (train, _) = load_corpora(s, &vocab)?;
    let models: Vec<QuantizedModel> = load_prototypes(s)?.into_iter().map(|(_, m)| m).collect();
    if models[0].vocab_hash != ck.vocab_hash {
        return Err(Error::config("prototypes and checkpoint use different vocabularies"));
    }
    let protos = PrototypeSet::from_models(&models)?;
    let method = s.method()?;
    let report = build_report(&ck.spec, &ck.params, &protos, method, &train, &s.sample()?, &s.hutchinson()?)?;
    let out = write_out(s, report.to_tsv().as_bytes())?;
    emit(json!({
        "event": "sensitivity",
        "path": out.display().to_string(),
        "method": method.name(),
        "entries": report.entries.len(),
        "negative_trace": report.negative_trace,
    }));
    Ok(())
}

fn layout_spec(s: &Settings) -> Result<ModelSpec> {
    if let Some(p) = &s.checkpoint {
        return Ok(ModelFile::load(p)?.spec().clone());
    }
    if let Some(p) = &s.model {
        return Ok(ModelFile::load(p)?.spec().clone());
    }
    if s.prototypes.is_some() {
        return Ok(load_prototypes(s)?.swap_remove(0).1.spec);
    }
    Err(Error::config("need --checkpoint, --model or --prototypes for the cluster layout"))
}

fn emit_assignment(event: &str, s: &Settings, a: &PrecisionAssignment, spec: &ModelSpec, extra: serde_json::Value) -> Result<()> {
    let layout = cluster_layout(spec);
    let out = write_out(s, a.to_text(&layout).as_bytes())?;
    let size = model_size_bytes(a, &layout);
    let mut v = json!({
        "event": event,
        "path": out.display().to_string(),
        "avg_bits": a.avg_bits(&layout),
        "predicted_bytes": size.total_bytes,
        "compression_ratio": size.compression_ratio(),
    });
    if let (Some(obj), serde_json::Value::Object(more)) = (v.as_object_mut(), extra) {
        obj.extend(more);
    }
    emit(v);
    Ok(())
}

pub fn assign(s: &Settings) -> Result<()> {
    let report = SensitivityReport::from_tsv(&read_text(s.require(&s.report, "report")?)?)?;
    let spec = layout_spec(s)?;
    let layout = cluster_layout(&spec);
    let budget = s.budget_spec()?;
    let a = solve(&report, &layout, &budget)?;
    emit_assignment("assign", s, &a, &spec, json!({"budget": budget.target_avg_bits, "mode": s.budget_mode}))
}

pub fn nas(s: &Settings) -> Result<()> {
    let models: Vec<QuantizedModel> = load_prototypes(s)?.into_iter().map(|(_, m)| m).collect();
    let vocab = load_vocab(s, models[0].vocab_hash)?;
    let (train, _) = load_corpora(s, &vocab)?;
    let protos = PrototypeSet::from_models(&models)?;
    let r = search_for_target(&protos, &train, s.beta_target, s.bisect_steps, &s.search())?;
    emit_assignment("nas", s, &r.assignment, &protos.spec, json!({"beta": r.beta, "target": s.beta_target}))
}

pub fn finetune(s: &Settings) -> Result<()> {
    let out = s.require(&s.out, "out")?;
    let loaded = load_prototypes(s)?;
    let spec = loaded[0].1.spec.clone();
    let vocab_hash = loaded[0].1.vocab_hash;
    let mut prototypes = Vec::with_capacity(loaded.len());
    for (path, m) in &loaded {
        let bits = m.clusters[0].bits;
        if m.clusters.iter().any(|c| c.bits != bits) {
            return Err(Error::config(format!("{} is not uniformly quantized", path.display())));
        }
        let side = |what: &str| -> Result<ParamVector> {
            let p = sidecar(path, what);
            let c = Checkpoint::load(&p)?;
            if c.spec != spec {
                return Err(Error::config(format!("{} does not match its prototype", p.display())));
            }
            Ok(c.params)
        };
        prototypes.push(Prototype {
            bits,
            theta: side("theta")?,
            lambda: side("lambda")?,
            scales: m.clusters.iter().map(|c| c.scale as f64).collect(),
            codes: m.clusters.iter().map(|c| c.codes.clone()).collect(),
        });
    }
    let layout = cluster_layout(&spec);
    let assignment = PrecisionAssignment::from_text(&read_text(s.require(&s.assignment, "assignment")?)?, &layout)?;
    let vocab = load_vocab(s, vocab_hash)?;
    let (train, valid) = load_corpora(s, &vocab)?;
    let outcome = finetune_assignment(&spec, &prototypes, &assignment, &train, &valid, &s.admm()?, vocab_hash)?;
    print_report(&outcome);
    let bytes = outcome.model.save(out)?;
    emit(json!({
        "event": "finetuned",
        "path": out.display().to_string(),
        "avg_bits": assignment.avg_bits(&layout),
        "bytes": bytes,
        "best_k": outcome.report.best_k,
        "val_ppl": outcome.report.best_val_ppl,
    }));
    Ok(())
}

pub fn eval(s: &Settings) -> Result<()> {
    let path = s.require(&s.model, "model")?;
    let model = ModelFile::load(path)?;
    let vocab = load_vocab(s, model.vocab_hash())?;
    let corpus = Corpus::from_text(&read_text(s.require(&s.text, "text")?)?, &vocab, s.token_mode()?);
    let spec = model.spec();
    let params = model.params()?;
    let ppl = perplexity(spec, &params, &corpus)?;
    const RUNS: u32 = 3;
    let start = Instant::now();
    for _ in 0..RUNS {
        perplexity(spec, &params, &corpus)?;
    }
    let ms_per_token = start.elapsed().as_secs_f64() * 1e3 / RUNS as f64 / corpus.num_targets().max(1) as f64;
    let model_bytes = fs::metadata(path)?.len() as usize;
    let baseline = Checkpoint { spec: spec.clone(), vocab_hash: model.vocab_hash(), params }.to_bytes()?.len();
    let mut v = json!({
        "event": "eval",
        "ppl": ppl,
        "tokens": corpus.num_targets(),
        "model_bytes": model_bytes,
        "float32_checkpoint_bytes": baseline,
        "compression_ratio": baseline as f64 / model_bytes as f64,
        "ms_per_token": ms_per_token,
        "timing_note": "mean of 3 warm runs on this machine; not comparable across hardware",
    });
    if let ModelFile::Packed(m) = &model {
        v["avg_bits"] = json!(m.assignment().avg_bits(&cluster_layout(spec)));
    }
    emit(v);
    Ok(())
}

pub fn inspect(s: &Settings) -> Result<()> {
    let path = s.require(&s.model, "model")?;
    let model = ModelFile::load(path)?;
    let spec = model.spec();
    let mut out = String::new();
    let format = match &model {
        ModelFile::Packed(_) => "MPQ1",
        ModelFile::Full(_) => "MPC1",
    };
    let _ = writeln!(out, "# format={format}");
    let _ = writeln!(out, "# bytes={}", fs::metadata(path)?.len());
    let _ = writeln!(
        out,
        "# kind={} vocab={} embed={} hidden={} layers={} heads={} max_context={} ff={} tie={}",
        json!(spec.kind).as_str().unwrap_or("?"),
        spec.vocab_size, spec.embed_dim, spec.hidden_dim, spec.num_layers, spec.num_heads, spec.max_context,
        spec.ff_dim,
        json!(spec.tie_granularity).as_str().unwrap_or("?")
    );
    let _ = writeln!(out, "# vocab_hash={:016x}", model.vocab_hash());
    match &model {
        ModelFile::Packed(m) => {
            let layout = cluster_layout(spec);
            let _ = writeln!(out, "# clusters={} avg_bits={:.4}", m.clusters.len(), m.assignment().avg_bits(&layout));
            out.push_str("cluster\tbits\tcount\tscale\n");
            for c in &m.clusters {
                let _ = writeln!(out, "{}\t{}\t{}\t{:e}", c.cluster_id, c.bits, c.codes.len(), c.scale);
            }
        }
        ModelFile::Full(c) => {
            let _ = writeln!(out, "# tensors={} params={}", c.params.len(), spec.param_count());
            out.push_str("tensor\trows\tcols\n");
            for (name, t) in c.params.entries() {
                let (r, k) = t.rows_cols();
                let _ = writeln!(out, "{name}\t{r}\t{k}");
            }
        }
    }
    print!("{out}");
    Ok(())
}
