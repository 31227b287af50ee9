use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use log::{error, info, warn};
use rayon::prelude::*;

use arcot::error::Error;
use arcot::eval::{code_phone_matrix, extract_codes, probe_train, purity, CodeSource, ProbeConfig};
use arcot::features::{
    archive_read, archive_write, compute_norm_stats, dataset_dim, normalize, read_ftr,
    read_manifest, wav_read, Alignments, FeatureSequence, LogMel, MelConfig, NormStats,
    PhoneInventory,
};
use arcot::kmeans::{assign_targets, fit, KmeansConfig};
use arcot::model::{LatentConfig, Model, Variant, VQ_APC_CODEWORD_DIM};
use arcot::numerics::{Decimal, Rng, Tensor2};
use arcot::objectives::{check_variant_gradients, marginal_log_likelihoods, sample_noise, Batch};
use arcot::synth::{generate, write_corpus, SynthConfig};
use arcot::training::{
    evaluate, init_state, load_checkpoint, save_checkpoint, train, write_loss_csv, TrainConfig,
    TrainData, TrainState,
};

use crate::manifest::RunManifest;
use crate::{
    CodesArgs, EvalLossArgs, Failure, FeaturizeArgs, GradcheckArgs, KmeansArgs, PretrainArgs,
    ProbeArgs, SynthArgs, EXIT_CHECK_FAILED, EXIT_DIVERGED,
};

type Settings = Vec<(String, String)>;

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn load_features(manifest: &Path) -> Result<Vec<FeatureSequence>> {
    let data = archive_read(manifest)?;
    if data.is_empty() {
        bail!("{} lists no utterances", manifest.display());
    }
    dataset_dim(&data)?;
    Ok(data)
}

pub fn featurize(a: FeaturizeArgs, settings: Settings) -> Result<()> {
    let config = MelConfig {
        window_ms: a.window_ms,
        hop_ms: a.hop_ms,
        n_mels: a.n_mels,
        pre_emphasis: a.pre_emphasis,
    };
    let wavs = read_manifest(&a.wav_manifest)?;
    if wavs.is_empty() {
        bail!("{} lists no utterances", a.wav_manifest.display());
    }
    let extractors: std::sync::Mutex<HashMap<u32, Arc<LogMel>>> = Default::default();
    let results: Vec<_> = wavs
        .par_iter()
        .map(|(id, path)| -> arcot::Result<FeatureSequence> {
            let tag = |e: Error| match e {
                Error::Utterance { .. } => e,
                other => Error::Utterance {
                    utt: id.clone(),
                    reason: other.to_string(),
                },
            };
            let (samples, rate) = wav_read(path).map_err(tag)?;
            let mel = {
                let mut cache = extractors.lock().expect("extractor cache");
                match cache.get(&rate) {
                    Some(m) => m.clone(),
                    None => {
                        let m = Arc::new(LogMel::new(config.clone(), rate).map_err(tag)?);
                        cache.insert(rate, m.clone());
                        m
                    }
                }
            };
            let frames = mel.compute(&samples).map_err(tag)?;
            let mut seq = FeatureSequence::new(id.clone(), frames);
            seq.frame_hop_ms = a.hop_ms;
            Ok(seq)
        })
        .collect();
    let mut feats = vec![];
    let mut failed = 0;
    for r in results {
        match r {
            Ok(s) => feats.push(s),
            Err(e) => {
                error!("{e}");
                failed += 1;
            }
        }
    }
    let mut rates: Vec<u32> = extractors
        .into_inner()
        .expect("extractor cache")
        .into_keys()
        .collect();
    if rates.len() > 1 {
        rates.sort_unstable();
        bail!(
            "mixed sample rates {rates:?} in {}",
            a.wav_manifest.display()
        );
    }
    let stats = match (&a.stats, &a.fit_stats) {
        (Some(p), _) => Some(NormStats::read(p)?),
        (None, Some(p)) if !feats.is_empty() => {
            let s = compute_norm_stats(&feats)?;
            s.write(p)?;
            Some(s)
        }
        _ => None,
    };
    if let Some(s) = &stats {
        feats = feats
            .iter()
            .map(|f| normalize(f, s))
            .collect::<arcot::Result<_>>()?;
    }
    create_dir(&a.out_dir)?;
    let manifest = archive_write(&feats, &a.out_dir)?;
    let mut run = RunManifest::new("featurize", settings);
    run.input_listing(&a.wav_manifest)?;
    if let Some(p) = &a.stats {
        run.input(p)?;
    }
    run.output(&manifest)?;
    if let Some(p) = &a.fit_stats {
        if p.exists() {
            run.output(p)?;
        }
    }
    run.write(&a.out_dir)?;
    info!("wrote {} utterances to {}", feats.len(), manifest.display());
    if failed > 0 {
        bail!("{failed} of {} utterances failed", wavs.len());
    }
    Ok(())
}

pub fn kmeans(a: KmeansArgs, settings: Settings) -> Result<()> {
    let data = load_features(&a.features)?;
    let cfg = KmeansConfig {
        clusters: a.clusters,
        iters: a.iters,
        init_utterances: a.init_utterances,
        lloyd_on_full_data: a.lloyd_on_full_data,
    };
    let r = fit(&data, &cfg, &mut Rng::new(a.seed))?;
    create_dir(&a.out_dir)?;
    let centroids = a.out_dir.join("centroids.ftr");
    arcot::features::write_ftr(&centroids, &r.centroids)?;
    let targets = a.out_dir.join("targets.tsv");
    assign_targets(&data, &r.centroids)?.write(&targets)?;
    let history = a.out_dir.join("objective.csv");
    let mut csv = String::from("iteration,objective\n");
    for (i, v) in r.history.iter().enumerate() {
        csv.push_str(&format!("{i},{}\n", Decimal(*v)));
    }
    write_text(&history, &csv)?;
    let mut run = RunManifest::new("kmeans", settings);
    run.input_listing(&a.features)?;
    for p in [&centroids, &targets, &history] {
        run.output(p)?;
    }
    run.write(&a.out_dir)?;
    info!(
        "{} clusters, objective {} after {} iterations",
        a.clusters, r.objective, r.iterations
    );
    Ok(())
}

fn checkpoint_path(dir: &Path, epoch: u64) -> PathBuf {
    dir.join(format!("epoch-{epoch:03}.ckpt"))
}

pub fn pretrain(a: PretrainArgs, threads: usize, settings: Settings) -> Result<()> {
    let data = load_features(&a.features)?;
    let frame_dim = data[0].dim();
    let variant: Variant = a.variant.parse()?;

    let (cfg, resumed) = match &a.resume {
        Some(path) => {
            let (mut cfg, state) = load_checkpoint(path)?;
            if cfg.seed != a.seed {
                bail!(
                    "--seed {} differs from the checkpoint's seed {}",
                    a.seed,
                    cfg.seed
                );
            }
            if cfg.variant != variant {
                bail!(
                    "--variant {variant} differs from the checkpoint's {}",
                    cfg.variant
                );
            }
            cfg.epochs = a.epochs;
            (cfg, Some(state))
        }
        None => {
            let codeword_dim = match variant {
                Variant::VqApc => a.codeword_dim.unwrap_or(VQ_APC_CODEWORD_DIM),
                _ => a.codeword_dim.unwrap_or(frame_dim),
            };
            let cfg = TrainConfig {
                variant,
                model: LatentConfig {
                    codebook_size: a.codebook_size,
                    shift: a.shift,
                    frame_dim,
                    hidden: a.hidden,
                    layers: a.layers,
                    codeword_dim,
                },
                lr: a.lr,
                batch_size: a.batch,
                epochs: a.epochs,
                seed: a.seed,
                tau_start: a.tau_start,
                tau_end: a.tau_end,
                tau_decay: a.tau_decay,
                straight_through: a.straight_through,
                grad_clip: a.grad_clip,
                threads,
            };
            (cfg, None)
        }
    };
    cfg.validate()?;
    if cfg.model.frame_dim != frame_dim {
        bail!(
            "features have dimension {frame_dim}, the model expects {}",
            cfg.model.frame_dim
        );
    }

    let (targets, centroids) = if variant == Variant::HubertLike {
        let (Some(t), Some(c)) = (&a.targets, &a.centroids) else {
            bail!("hubert-like training needs --targets and --centroids");
        };
        (Some(Alignments::read(t)?), Some(read_ftr(c)?))
    } else {
        (None, None)
    };
    let mut train_data = TrainData::new(&data, cfg.model.shift, targets)?;
    create_dir(&a.out_dir)?;
    let loss_log = a.out_dir.join("loss.csv");

    let mut state = match resumed {
        Some(s) => s,
        None => {
            let s = init_state(&cfg, &mut train_data, centroids.as_ref())?;
            save_checkpoint(checkpoint_path(&a.out_dir, 0), &cfg, &s)?;
            s
        }
    };
    write_loss_csv(&loss_log, variant, &state.history)?;

    let dir = a.out_dir.clone();
    let result = train(&mut state, &cfg, &train_data, |s: &TrainState| {
        save_checkpoint(checkpoint_path(&dir, s.epoch), &cfg, s)?;
        write_loss_csv(&loss_log, variant, &s.history)
    });
    if let Err(e) = result {
        if matches!(e, Error::NonFinite(_)) {
            let diag = a.out_dir.join("diagnostic.ckpt");
            save_checkpoint(&diag, &cfg, &state)?;
            return Err(anyhow!(Failure {
                code: EXIT_DIVERGED,
                message: format!("{e}; diagnostic checkpoint written to {}", diag.display()),
            }));
        }
        return Err(e.into());
    }

    let mut run = RunManifest::new("pretrain", settings);
    run.input_listing(&a.features)?;
    for p in [&a.targets, &a.centroids, &a.resume].into_iter().flatten() {
        run.input(p)?;
    }
    run.output(&checkpoint_path(&a.out_dir, state.epoch))?;
    run.output(&loss_log)?;
    run.write(&a.out_dir)?;
    if let Some(last) = state.history.last() {
        info!(
            "finished epoch {}: objective {:.4}",
            last.epoch, last.objective
        );
    }
    Ok(())
}

fn load_model(path: &Path) -> Result<Model<f32>> {
    Ok(load_checkpoint(path)?.1.model)
}

pub fn probe(a: ProbeArgs, settings: Settings) -> Result<()> {
    let model = load_model(&a.checkpoint)?;
    let phones = PhoneInventory::read(&a.phones)?;
    let train_feats = load_features(&a.train_features)?;
    let eval_feats = load_features(&a.eval_features)?;
    let train_align = Alignments::read(&a.train_alignments)?;
    let eval_align = Alignments::read(&a.eval_alignments)?;
    let cfg = ProbeConfig {
        layer: a.layer,
        lr: a.lr,
        epochs: a.epochs,
        batch_size: a.batch,
        seed: a.seed,
    };
    let r = probe_train(
        &model,
        &cfg,
        (&train_feats, &train_align),
        (&eval_feats, &eval_align),
        phones.len(),
    )?;
    create_dir(&a.out_dir)?;
    let result = a.out_dir.join("probe.csv");
    let confusion = a.out_dir.join("confusion.csv");
    write_text(&result, &r.csv())?;
    write_text(&confusion, &r.confusion_csv(&phones))?;
    let mut run = RunManifest::new("probe", settings);
    run.input(&a.checkpoint)?;
    run.input_listing(&a.train_features)?;
    run.input_listing(&a.eval_features)?;
    for p in [&a.train_alignments, &a.eval_alignments, &a.phones] {
        run.input(p)?;
    }
    run.output(&result)?;
    run.output(&confusion)?;
    run.write(&a.out_dir)?;
    print!("{}", r.csv());
    Ok(())
}

pub fn codes(a: CodesArgs, settings: Settings) -> Result<()> {
    let model = load_model(&a.checkpoint)?;
    let data = load_features(&a.features)?;
    let source: CodeSource = a.source.parse()?;
    create_dir(&a.out_dir)?;
    let codes_path = a.out_dir.join("codes.tsv");
    extract_codes(&model, &data, source)?.write(&codes_path)?;
    let mut run = RunManifest::new("codes", settings);
    run.input(&a.checkpoint)?;
    run.input_listing(&a.features)?;
    run.output(&codes_path)?;
    if let (Some(ap), Some(pp)) = (&a.alignments, &a.phones) {
        let align = Alignments::read(ap)?;
        let phones = PhoneInventory::read(pp)?;
        let m = code_phone_matrix(&model, &data, &align, phones.len(), source)?;
        let matrix = a.out_dir.join("matrix.csv");
        write_text(&matrix, &m.csv(&phones))?;
        let summary = a.out_dir.join("purity.csv");
        let p = purity(&m)?;
        write_text(
            &summary,
            &format!(
                "source,purity,frames\n{},{},{}\n",
                a.source,
                Decimal(p),
                m.total()
            ),
        )?;
        run.input(ap)?;
        run.input(pp)?;
        run.output(&matrix)?;
        run.output(&summary)?;
        println!("purity {p:.4} over {} frames", m.total());
    }
    run.write(&a.out_dir)?;
    Ok(())
}

/// The tiny model used for gradient checks: d=4, N=5, H=8, two layers,
/// shift 2, two utterances of 12 frames.
fn gradcheck_setup(variant: Variant, rng: &mut Rng) -> Result<(Model<f64>, Batch<f64>)> {
    let cfg = LatentConfig {
        codebook_size: 5,
        shift: 2,
        frame_dim: 4,
        hidden: 8,
        layers: 2,
        codeword_dim: if variant == Variant::VqApc { 6 } else { 4 },
    };
    let model = Model::init(cfg, variant, arcot::model::CodebookInit::Random, rng)?;
    let mut frames = vec![];
    let mut targets = vec![];
    for _ in 0..2 {
        let data = (0..12 * 4).map(|_| rng.normal()).collect();
        frames.push(Tensor2::from_vec(12, 4, data)?);
        targets.push((0..12).map(|_| rng.below(5)).collect());
    }
    let refs: Vec<&Tensor2<f64>> = frames.iter().collect();
    let batch = Batch::from_frames(vec!["a".into(), "b".into()], &refs, Some(targets))?;
    Ok((model, batch))
}

pub fn gradcheck(a: GradcheckArgs) -> Result<()> {
    let variants: Vec<Variant> = if a.variant == "all" {
        Variant::ALL.to_vec()
    } else {
        vec![a.variant.parse()?]
    };
    println!("variant,block,max_rel_error,probed");
    let mut worst: f64 = 0.0;
    for variant in variants {
        let mut rng = Rng::new(a.seed);
        let (model, batch) = gradcheck_setup(variant, &mut rng)?;
        let n = batch.valid_frames(model.config.shift).len();
        let noise = sample_noise(&mut rng, n, model.config.codebook_size);
        let report = check_variant_gradients(
            &model,
            &batch,
            a.temperature,
            Some(&noise),
            a.epsilon,
            &mut rng,
        )?;
        for b in &report.blocks {
            println!("{variant},{},{:e},{}", b.name, b.max_rel_error, b.probed);
        }
        worst = worst.max(report.max_rel_error());
    }
    if !(worst < a.tolerance) {
        return Err(anyhow!(Failure {
            code: EXIT_CHECK_FAILED,
            message: format!("max relative error {worst:e} exceeds {:e}", a.tolerance),
        }));
    }
    info!("max relative error {worst:e}");
    Ok(())
}

pub fn synth(a: SynthArgs, settings: Settings) -> Result<()> {
    let cfg = SynthConfig {
        states: a.states,
        dim: a.dim,
        self_prob: a.self_prob,
        noise: a.noise,
        separation: a.separation,
        min_len: a.min_len,
        max_len: a.max_len,
        utterances: a.utterances,
        seed: a.seed,
    };
    let (feats, align) = generate(&cfg)?;
    let manifest = write_corpus(&a.out_dir, &cfg, &feats, &align)?;
    let mut run = RunManifest::new("synth", settings);
    run.output(&manifest)?;
    for name in [
        arcot::synth::ALIGNMENTS_NAME,
        arcot::synth::PHONES_NAME,
        arcot::synth::CENTROIDS_NAME,
    ] {
        run.output(&a.out_dir.join(name))?;
    }
    run.write(&a.out_dir)?;
    info!("wrote {} utterances to {}", feats.len(), manifest.display());
    Ok(())
}

pub fn eval_loss(a: EvalLossArgs) -> Result<()> {
    let (_, state) = load_checkpoint(&a.checkpoint)?;
    let model = state.model;
    let data = load_features(&a.features)?;
    let k = model.config.shift;
    let mut eval_data = TrainData::new(&data, k, None)?;
    arcot::training::prepare_targets(&model, &mut eval_data)?;
    let b = evaluate(&model, &eval_data, a.batch)?;
    let marginal = if model.codebook().is_some() {
        let mut sum = 0.0;
        for chunk in eval_data.sequences.chunks(a.batch.max(1)) {
            let batch = Batch::from_sequences(chunk, None)?;
            sum += marginal_log_likelihoods(&batch, &model)?
                .iter()
                .sum::<f64>();
        }
        Decimal(sum / b.frames as f64).to_string()
    } else {
        warn!(
            "{} has no codebook; marginal likelihood not defined",
            model.variant
        );
        "nan".to_string()
    };
    let csv = format!(
        "frames,objective,ce,recon,entropy,marginal_ll\n{},{},{},{},{},{marginal}\n",
        b.frames,
        Decimal(b.per_frame_objective),
        Decimal(b.ce),
        Decimal(b.recon),
        Decimal(b.entropy)
    );
    print!("{csv}");
    if let Some(p) = &a.out {
        write_text(p, &csv)?;
    }
    Ok(())
}
