use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde_json::json;

use super::{
    AblateArgs, AttackArgs, AttackFlags, Cli, CliError, Command, EvalArgs, GradcheckArgs,
    ModelFlags, Part, RunConfig, SplitFlags, SynthArgs, TrainArgs, TrainFlags, VolArgs,
};
use crate::adversary::{self, AttackConfig};
use crate::dataset::{
    self, generate_synthetic, split_corpus, Corpus, EarningsCallRecord, SynthConfig,
};
use crate::evaluator::{self, EvalReport};
use crate::market_data::{self, PriceSeries};
use crate::model::{self, Checkpoint, ModelConfig, Regressor};
use crate::par;
use crate::trainer::{self, prepare_samples};

pub(super) fn execute(cli: &Cli) -> Result<(), CliError> {
    let mut cfg = match &cli.global.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.global.seed {
        cfg.seed = seed;
    }
    if let Some(jobs) = cli.global.jobs {
        cfg.jobs = jobs;
    }
    match &cli.command {
        Command::Synth(a) => synth(cfg, a),
        Command::Vol(a) => vol(cfg, a),
        Command::Train(a) => train(cfg, a),
        Command::Eval(a) => eval(cfg, a),
        Command::Attack(a) => attack(cfg, a),
        Command::Gradcheck(a) => gradcheck(cfg, a),
        Command::Ablate(a) => ablate(cfg, a),
    }
}

fn set<T: Clone>(slot: &mut T, value: &Option<T>) {
    if let Some(v) = value {
        *slot = v.clone();
    }
}

fn apply_attack(cfg: &mut RunConfig, eps: Option<f64>, flags: &AttackFlags) {
    let attack = &mut cfg.train.attack;
    if let Some(eps) = eps {
        *attack = attack.with_epsilon(eps);
    }
    set(&mut attack.beta, &flags.beta);
    set(&mut attack.steps, &flags.steps);
    set(&mut attack.mode, &flags.attack);
    set(&mut attack.target, &flags.perturb);
    if flags.attack_seed.is_some() {
        cfg.attack_seed = flags.attack_seed;
    }
}

fn apply_model(cfg: &mut ModelConfig, flags: &ModelFlags) {
    set(&mut cfg.modality, &flags.modality);
    set(&mut cfg.u_text, &flags.u_text);
    set(&mut cfg.u_audio, &flags.u_audio);
    set(&mut cfg.u_fused, &flags.u_fused);
    set(&mut cfg.attn_dim, &flags.attn_dim);
    set(&mut cfg.feature_dim, &flags.feature_dim);
}

fn apply_train(cfg: &mut RunConfig, flags: &TrainFlags) {
    let t = &mut cfg.train;
    set(&mut t.epochs, &flags.epochs);
    set(&mut t.batch_size, &flags.batch_size);
    set(&mut t.learning_rate, &flags.lr);
    set(&mut t.lambda, &flags.lambda);
    set(&mut t.clean_mix, &flags.clean_mix);
    set(&mut t.optimizer, &flags.optimizer);
    set(&mut t.patience, &flags.patience);
    set(&mut t.horizon, &flags.horizon);
}

fn apply_split(cfg: &mut RunConfig, flags: &SplitFlags) {
    if let Some(r) = &flags.split {
        cfg.split.ratios = [r[0], r[1], r[2]];
    }
    set(&mut cfg.split.mode, &flags.split_mode);
}

/// Logs and returns the JSON embedded in every artifact of this run.
fn provenance(command: &str, cfg: &RunConfig, inputs: serde_json::Value) -> serde_json::Value {
    let value = json!({ "command": command, "inputs": inputs, "config": cfg.to_json() });
    log::info!("resolved config: {value}");
    value
}

fn config_comment(value: &serde_json::Value) -> String {
    format!("config: {value}")
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)
            .map_err(|e| CliError::Validation(format!("{}: {e}", dir.display())))?;
    }
    std::fs::write(path, text).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
}

fn path_str(p: &Path) -> String {
    p.display().to_string()
}

fn load_corpus(path: &Path) -> Result<Corpus, CliError> {
    dataset::load_corpus(path).map_err(CliError::invalid)
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, CliError> {
    model::load_checkpoint(path).map_err(CliError::invalid)
}

struct Parts {
    train: Vec<EarningsCallRecord>,
    val: Vec<EarningsCallRecord>,
    test: Vec<EarningsCallRecord>,
}

fn split_parts(corpus: &Corpus, cfg: &RunConfig) -> Result<Parts, CliError> {
    let s = split_corpus(&corpus.records, cfg.split.ratios, cfg.seed, cfg.split.mode)
        .map_err(CliError::invalid)?;
    Ok(Parts {
        train: corpus.subset(&s.train),
        val: corpus.subset(&s.val),
        test: corpus.subset(&s.test),
    })
}

fn select(
    corpus: &Corpus,
    cfg: &RunConfig,
    part: Part,
) -> Result<Vec<EarningsCallRecord>, CliError> {
    if part == Part::All {
        return Ok(corpus.records.clone());
    }
    let parts = split_parts(corpus, cfg)?;
    Ok(match part {
        Part::Train => parts.train,
        Part::Val => parts.val,
        _ => parts.test,
    })
}

fn check_dims(corpus: &Corpus, model: &ModelConfig) -> Result<(), CliError> {
    if corpus.meta.dt != model.dt || corpus.meta.da != model.da {
        return Err(CliError::Validation(format!(
            "corpus has Dt={}, Da={} but the checkpoint expects Dt={}, Da={}",
            corpus.meta.dt, corpus.meta.da, model.dt, model.da
        )));
    }
    Ok(())
}

fn synth(mut cfg: RunConfig, a: &SynthArgs) -> Result<(), CliError> {
    let s: &mut SynthConfig = &mut cfg.synth;
    set(&mut s.p, &a.p);
    set(&mut s.q_max, &a.q_max);
    set(&mut s.dt, &a.dt);
    set(&mut s.da, &a.da);
    set(&mut s.latent_dim, &a.latent_dim);
    set(&mut s.female_fraction, &a.female_fraction);
    set(&mut s.noise_sigma, &a.noise_sigma);
    set(&mut s.gender_audio_shift, &a.gender_shift);
    set(&mut s.horizons, &a.horizons);
    let cfg = cfg.finalize();
    log::info!(
        "resolved config: {}",
        serde_json::to_string(&cfg.synth).expect("serializes")
    );
    let corpus = generate_synthetic(&cfg.synth).map_err(CliError::invalid)?;
    dataset::save_corpus(&corpus, &a.out).map_err(CliError::invalid)?;
    let females = corpus
        .records
        .iter()
        .filter(|r| r.gender == dataset::Gender::Female)
        .count();
    println!(
        "wrote {} records ({} female) to {}",
        corpus.len(),
        females,
        a.out.display()
    );
    Ok(())
}

fn price_files(paths: &[PathBuf]) -> Result<Vec<PathBuf>, CliError> {
    let mut files = Vec::new();
    for p in paths {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = std::fs::read_dir(p)
                .map_err(|e| CliError::Validation(format!("{}: {e}", p.display())))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.extension().is_some_and(|x| x == "csv"))
                .collect();
            found.sort();
            files.extend(found);
        } else {
            files.push(p.clone());
        }
    }
    Ok(files)
}

fn vol(mut cfg: RunConfig, a: &VolArgs) -> Result<(), CliError> {
    set(&mut cfg.vol.horizons, &a.horizons);
    set(&mut cfg.vol.floor, &a.vol_floor);
    let cfg = cfg.finalize();
    let files = price_files(&a.prices)?;
    let inputs = json!({
        "prices": files.iter().map(|f| path_str(f)).collect::<Vec<_>>(),
        "calls": path_str(&a.calls),
    });
    let prov = json!({ "command": "vol", "inputs": inputs, "vol": cfg.vol });
    log::info!("resolved config: {prov}");

    let mut series: BTreeMap<String, PriceSeries> = BTreeMap::new();
    for f in &files {
        let s = market_data::parse_price_csv(f)
            .map_err(|e| CliError::Validation(format!("{}: {e}", f.display())))?;
        if series.contains_key(&s.ticker) {
            return Err(CliError::Validation(format!(
                "ticker {} appears in two price files",
                s.ticker
            )));
        }
        series.insert(s.ticker.clone(), s);
    }
    let calls_text = std::fs::read_to_string(&a.calls)
        .map_err(|e| CliError::Validation(format!("{}: {e}", a.calls.display())))?;
    let calls = market_data::parse_call_list(&calls_text)
        .map_err(|e| CliError::Validation(format!("{}: {e}", a.calls.display())))?;

    let floor = (cfg.vol.floor > 0.0).then_some(cfg.vol.floor);
    let mut out = format!(
        "# {}\nticker,call_date,horizon,log_vol\n",
        config_comment(&prov)
    );
    for call in &calls {
        let s = series.get(&call.ticker).ok_or_else(|| {
            CliError::Validation(format!("no price file for ticker {}", call.ticker))
        })?;
        for &n in &cfg.vol.horizons {
            let label = market_data::label_call(s, call.call_date, n, floor).map_err(|e| {
                CliError::Validation(format!("{} {}: {e}", call.ticker, call.call_date))
            })?;
            out.push_str(&format!(
                "{},{},{},{}\n",
                call.ticker, call.call_date, n, label.value
            ));
        }
    }
    write_text(&a.out, &out)?;
    println!(
        "wrote {} labels for {} calls to {}",
        calls.len() * cfg.vol.horizons.len(),
        calls.len(),
        a.out.display()
    );
    Ok(())
}

fn train(mut cfg: RunConfig, a: &TrainArgs) -> Result<(), CliError> {
    let corpus = load_corpus(&a.corpus)?;
    cfg.model.dt = corpus.meta.dt;
    cfg.model.da = corpus.meta.da;
    apply_model(&mut cfg.model, &a.model);
    apply_train(&mut cfg, &a.train);
    apply_attack(&mut cfg, a.eps, &a.attack);
    apply_split(&mut cfg, &a.split);
    let cfg = cfg.finalize();
    let prov = provenance("train", &cfg, json!({ "corpus": path_str(&a.corpus) }));
    let parts = split_parts(&corpus, &cfg)?;

    let ckpt_path = a.out_dir.join("checkpoint.ndjson");
    let history_path = a.out_dir.join("history.csv");
    std::fs::create_dir_all(&a.out_dir)
        .map_err(|e| CliError::Validation(format!("{}: {e}", a.out_dir.display())))?;
    let checkpoint =
        |params: &model::ModelParams, standardizer: &dataset::Standardizer| Checkpoint {
            model: cfg.model.clone(),
            horizon: cfg.train.horizon,
            standardizer: standardizer.clone(),
            params: params.clone(),
            config: Some(prov.clone()),
        };
    let mut save_error = None;
    let outcome = trainer::train_with_callback(
        &parts.train,
        &parts.val,
        &cfg.model,
        &cfg.train,
        &mut |epoch, p, s| {
            log::debug!("epoch {epoch}: new best, writing checkpoint");
            if let Err(e) = model::save_checkpoint(&checkpoint(p, s), &ckpt_path) {
                save_error.get_or_insert(e);
            }
        },
    )?;
    if let Some(e) = save_error {
        return Err(CliError::invalid(e));
    }
    model::save_checkpoint(
        &checkpoint(&outcome.params, &outcome.standardizer),
        &ckpt_path,
    )
    .map_err(CliError::invalid)?;

    let mut history = format!("# {}\n", config_comment(&prov)).into_bytes();
    outcome
        .history
        .write_csv(&mut history)
        .expect("writing to memory");
    write_text(&history_path, &String::from_utf8(history).expect("utf-8"))?;

    match (
        outcome.best_epoch,
        outcome
            .history
            .epochs
            .iter()
            .find(|e| Some(e.epoch) == outcome.best_epoch),
    ) {
        (Some(best), Some(rec)) => println!(
            "best epoch {best} of {}: val_mse {:.6} val_adv_mse {:.6}",
            outcome.history.len(),
            rec.val_mse,
            rec.val_adv_mse
        ),
        _ => println!("no epochs run; wrote initial parameters"),
    }
    println!(
        "checkpoint: {}\nhistory: {}",
        ckpt_path.display(),
        history_path.display()
    );
    Ok(())
}

fn eval(mut cfg: RunConfig, a: &EvalArgs) -> Result<(), CliError> {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let corpus = load_corpus(&a.corpus)?;
    check_dims(&corpus, &ckpt.model)?;
    apply_attack(&mut cfg, None, &a.attack);
    set(&mut cfg.eval.eps, &a.eps);
    set(&mut cfg.eval.part, &a.part);
    apply_split(&mut cfg, &a.split);
    let cfg = cfg.finalize();
    let prov = provenance(
        "eval",
        &cfg,
        json!({ "corpus": path_str(&a.corpus), "checkpoint": path_str(&a.checkpoint) }),
    );
    let records = select(&corpus, &cfg, cfg.eval.part)?;
    let samples =
        prepare_samples(&records, &ckpt.standardizer, ckpt.horizon).map_err(CliError::invalid)?;
    let model = Regressor::new(&ckpt.params, &ckpt.model);
    let rows = par::with_jobs(cfg.jobs, || {
        evaluator::evaluate(
            &model,
            &samples,
            ckpt.horizon,
            ckpt.model.modality.as_str(),
            &cfg.train.attack,
            &cfg.eval.eps,
            cfg.train.execution(),
        )
    })?;
    let report = EvalReport { rows };
    write_report(&report, &prov, &a.out)?;
    print!("{report}");
    Ok(())
}

fn write_report(
    report: &EvalReport,
    prov: &serde_json::Value,
    path: &Path,
) -> Result<(), CliError> {
    let mut buf = Vec::new();
    report
        .write_csv(&mut buf, &[config_comment(prov)])
        .expect("writing to memory");
    write_text(path, &String::from_utf8(buf).expect("utf-8"))
}

fn attack(mut cfg: RunConfig, a: &AttackArgs) -> Result<(), CliError> {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let corpus = load_corpus(&a.corpus)?;
    check_dims(&corpus, &ckpt.model)?;
    apply_attack(&mut cfg, a.eps, &a.attack);
    set(&mut cfg.eval.part, &a.part);
    apply_split(&mut cfg, &a.split);
    let cfg = cfg.finalize();
    let prov = provenance(
        "attack",
        &cfg,
        json!({ "corpus": path_str(&a.corpus), "checkpoint": path_str(&a.checkpoint) }),
    );
    let records = select(&corpus, &cfg, cfg.eval.part)?;
    let samples =
        prepare_samples(&records, &ckpt.standardizer, ckpt.horizon).map_err(CliError::invalid)?;
    let model = Regressor::new(&ckpt.params, &ckpt.model);
    let attack_cfg: &AttackConfig = &cfg.train.attack;
    attack_cfg.validate().map_err(CliError::invalid)?;

    let results = par::with_jobs(cfg.jobs, || {
        par::map(
            cfg.train.execution(),
            &samples,
            |i, s| -> Result<_, CliError> {
                let (t, au) =
                    adversary::perturb(&model, &s.text, &s.audio, s.target, attack_cfg, i as u64)
                        .map_err(CliError::invalid)?;
                let clean = model
                    .predict(&s.text, &s.audio)
                    .map_err(CliError::invalid)?;
                let adv = model.predict(&t, &au).map_err(CliError::invalid)?;
                Ok((clean, adv, t, au))
            },
        )
    });

    let mut csv = format!(
        "# {}\ncall_id,gender,target,pred_clean,pred_adv,loss_clean,loss_adv,linf_text,linf_audio\n",
        config_comment(&prov)
    );
    let mut deltas = format!("{}\n", json!({ "config": prov }));
    let (mut before, mut after) = (0.0, 0.0);
    for ((r, s), res) in records.iter().zip(&samples).zip(results) {
        let (clean, adv, t, au) = res?;
        let (lc, la) = ((clean - s.target).powi(2), (adv - s.target).powi(2));
        before += lc;
        after += la;
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.call_id,
            r.gender,
            s.target,
            clean,
            adv,
            lc,
            la,
            adversary::linf_distance(&t, &s.text),
            adversary::linf_distance(&au, &s.audio)
        ));
        if a.deltas.is_some() {
            let diff =
                |x: &crate::autodiff::Tensor, x0: &crate::autodiff::Tensor| -> Vec<Vec<f64>> {
                    (0..x.rows())
                        .map(|i| x.row(i).iter().zip(x0.row(i)).map(|(p, q)| p - q).collect())
                        .collect()
                };
            let line = json!({ "call_id": r.call_id, "text": diff(&t, &s.text), "audio": diff(&au, &s.audio) });
            deltas.push_str(&format!("{line}\n"));
        }
    }
    write_text(&a.out, &csv)?;
    if let Some(path) = &a.deltas {
        write_text(path, &deltas)?;
    }
    let n = samples.len().max(1) as f64;
    println!(
        "{} records, mode {}, eps {}: mean loss {:.6} -> {:.6}",
        samples.len(),
        attack_cfg.mode.as_str(),
        attack_cfg.epsilon,
        before / n,
        after / n
    );
    Ok(())
}

/// Small architecture used by `gradcheck` so every coordinate can be checked quickly.
pub fn gradcheck_model(seed: u64) -> ModelConfig {
    ModelConfig {
        dt: 4,
        da: 3,
        u_text: 3,
        u_audio: 3,
        u_fused: 3,
        attn_dim: 3,
        feature_dim: 3,
        seed,
        ..Default::default()
    }
}

fn gradcheck(cfg: RunConfig, a: &GradcheckArgs) -> Result<(), CliError> {
    let cfg = cfg.finalize();
    if !(a.h > 0.0) || a.stride == 0 || a.seeds == 0 {
        return Err(CliError::Validation(
            "need h > 0, stride >= 1 and seeds >= 1".into(),
        ));
    }
    log::info!(
        "resolved config: {}",
        json!({ "command": "gradcheck", "seed": cfg.seed, "h": a.h, "stride": a.stride, "threshold": a.threshold, "seeds": a.seeds })
    );
    let mut worst: f64 = 0.0;
    for seed in cfg.seed..cfg.seed + a.seeds {
        let mcfg = gradcheck_model(seed);
        let corpus = generate_synthetic(&SynthConfig {
            p: 1,
            q_max: 4,
            dt: mcfg.dt,
            da: mcfg.da,
            latent_dim: 2,
            seed,
            ..Default::default()
        })
        .map_err(CliError::invalid)?;
        let rec = &corpus.records[0];
        let params = model::init_params(&mcfg);
        let target = rec.target(3).unwrap_or(0.0);
        let (theta, x) = model::check_gradients(
            &rec.text_emb,
            &rec.audio_emb,
            target,
            &params,
            &mcfg,
            a.h,
            a.stride,
        )
        .map_err(CliError::invalid)?;
        println!(
            "seed {seed}: params max_rel_error {:.3e} ({} coords), inputs max_rel_error {:.3e} ({} coords)",
            theta.max_rel_error, theta.coordinates, x.max_rel_error, x.coordinates
        );
        worst = worst.max(theta.max_rel_error).max(x.max_rel_error);
    }
    println!(
        "max relative error {worst:.3e} (threshold {:.0e})",
        a.threshold
    );
    if worst < a.threshold {
        Ok(())
    } else {
        Err(CliError::Numeric(format!(
            "gradient check failed: {worst:.3e} >= {:.0e}",
            a.threshold
        )))
    }
}

fn ablate(mut cfg: RunConfig, a: &AblateArgs) -> Result<(), CliError> {
    let corpus = load_corpus(&a.corpus)?;
    cfg.model.dt = corpus.meta.dt;
    cfg.model.da = corpus.meta.da;
    apply_model(&mut cfg.model, &a.model);
    apply_train(&mut cfg, &a.train);
    apply_attack(&mut cfg, a.train_eps, &a.attack);
    apply_split(&mut cfg, &a.split);
    set(&mut cfg.eval.eps, &a.eps);
    set(&mut cfg.eval.horizons, &a.horizons);
    let cfg = cfg.finalize();
    let prov = provenance("ablate", &cfg, json!({ "corpus": path_str(&a.corpus) }));
    let parts = split_parts(&corpus, &cfg)?;
    let ablation = evaluator::ablation(
        &parts.train,
        &parts.val,
        &parts.test,
        &cfg.model,
        &cfg.train,
        &cfg.eval.horizons,
        &cfg.eval.eps,
    )?;
    write_report(&ablation.report, &prov, &a.out)?;
    print!("{}", ablation.report);
    Ok(())
}
