use arcot::eval::{purity, CodePhoneMatrix};
use arcot::features::{archive_read, Alignments, PhoneInventory};
use arcot::kmeans::{assign_targets, nearest};
use arcot::model::{confirmation_distribution, CodebookInit, LatentConfig, Model, Variant};
use arcot::numerics::{Rng, Tensor2};
use arcot::objectives::{marginal_log_likelihoods, Batch};
use arcot::synth::*;

#[test]
fn transition_frequencies_match_the_chain() {
    let cfg = SynthConfig {
        states: 4,
        dim: 1,
        self_prob: 0.6,
        min_len: 10_001,
        max_len: 10_001,
        utterances: 100,
        seed: 5,
        ..SynthConfig::default()
    };
    let (_, align) = generate(&cfg).unwrap();
    let mut counts = [[0usize; 4]; 4];
    let mut steps = 0;
    for (_, s) in align.iter() {
        for w in s.windows(2) {
            counts[w[0]][w[1]] += 1;
            steps += 1;
        }
    }
    assert_eq!(steps, 1_000_000);
    let trans = cfg.transition_matrix();
    for (i, row) in counts.iter().enumerate() {
        let n: usize = row.iter().sum();
        for (j, &c) in row.iter().enumerate() {
            let f = c as f64 / n as f64;
            assert!((f - trans[(i, j)]).abs() < 0.005, "{i}->{j}: {f}");
        }
    }
}

#[test]
fn default_preset_is_well_separated() {
    let cfg = SynthConfig::default();
    let mu = oracle_codebook(&cfg).unwrap();
    let (feats, align) = generate(&cfg).unwrap();
    let (mut wrong, mut total) = (0usize, 0usize);
    for s in &feats {
        let states = align.get(&s.utt_id).unwrap();
        assert_eq!(states.len(), s.len());
        for t in 0..s.len() {
            if nearest(s.frames.row(t), &mu).0 != states[t] {
                wrong += 1;
            }
            total += 1;
        }
    }
    assert!((wrong as f64 / total as f64) < 1e-3, "{wrong} of {total}");
}

#[test]
fn noiseless_frames_are_centroids() {
    let cfg = SynthConfig {
        noise: 0.0,
        utterances: 20,
        ..SynthConfig::default()
    };
    let mu = oracle_codebook(&cfg).unwrap();
    let (feats, align) = generate(&cfg).unwrap();
    let codes = assign_targets(&feats, &mu).unwrap();
    let mut counts = Tensor2::zeros(cfg.states, cfg.states);
    for s in &feats {
        let states = align.get(&s.utt_id).unwrap();
        for (t, &c) in codes.get(&s.utt_id).unwrap().iter().enumerate() {
            assert_eq!(s.frames.row(t), mu.row(states[t]));
            counts[(states[t], c)] += 1.0;
        }
    }
    assert_eq!(purity(&CodePhoneMatrix::from_counts(counts)).unwrap(), 1.0);
}

#[test]
fn near_noiseless_confirmation_is_one_hot() {
    let cfg = SynthConfig {
        noise: 1e-3,
        utterances: 3,
        ..SynthConfig::default()
    };
    let mu = oracle_codebook(&cfg).unwrap();
    let (feats, align) = generate(&cfg).unwrap();
    for s in &feats {
        let states = align.get(&s.utt_id).unwrap();
        for t in 0..s.len() {
            let q = confirmation_distribution(s.frames.row(t), &mu).unwrap();
            assert!(q.probs[states[t]] > 1.0 - 1e-6);
        }
    }
}

#[test]
fn true_codebook_beats_a_shuffled_one() {
    let cfg = SynthConfig {
        utterances: 10,
        ..SynthConfig::default()
    };
    let mu = oracle_codebook(&cfg).unwrap();
    let mut scrambled = mu.as_slice().to_vec();
    Rng::new(1).shuffle(&mut scrambled);
    let scrambled = Tensor2::from_vec(mu.rows(), mu.cols(), scrambled).unwrap();
    let (feats, _) = generate(&cfg).unwrap();
    let latent = LatentConfig {
        codebook_size: 8,
        hidden: 16,
        layers: 1,
        ..LatentConfig::default()
    };
    let refs: Vec<_> = feats.iter().collect();
    let batch = Batch::from_sequences(&refs, None).unwrap();
    let score = |v: Tensor2<f32>| -> f64 {
        let model = Model::init(
            latent.clone(),
            Variant::CotrainExact,
            CodebookInit::Fixed(v),
            &mut Rng::new(2),
        )
        .unwrap();
        marginal_log_likelihoods(&batch, &model)
            .unwrap()
            .iter()
            .sum()
    };
    assert!(score(mu) > score(scrambled));
}

#[test]
fn written_corpus_reads_back() {
    let cfg = SynthConfig {
        utterances: 4,
        ..SynthConfig::default()
    };
    let (feats, align) = generate(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_corpus(dir.path(), &cfg, &feats, &align).unwrap();
    assert_eq!(archive_read(&manifest).unwrap(), feats);
    assert_eq!(
        Alignments::read(dir.path().join(ALIGNMENTS_NAME)).unwrap(),
        align
    );
    let phones = PhoneInventory::read(dir.path().join(PHONES_NAME)).unwrap();
    assert_eq!(phones.len(), 8);
    let mu = arcot::features::read_ftr(dir.path().join(CENTROIDS_NAME)).unwrap();
    assert_eq!(mu, oracle_codebook(&cfg).unwrap());
}

#[test]
fn invalid_configs_are_rejected() {
    for cfg in [
        SynthConfig {
            states: 0,
            ..SynthConfig::default()
        },
        SynthConfig {
            self_prob: 1.5,
            ..SynthConfig::default()
        },
        SynthConfig {
            min_len: 10,
            max_len: 5,
            ..SynthConfig::default()
        },
        SynthConfig {
            states: 1,
            self_prob: 0.5,
            ..SynthConfig::default()
        },
    ] {
        assert!(generate(&cfg).is_err());
    }
    let crowded = SynthConfig {
        dim: 1,
        states: 50,
        separation: 10.0,
        ..SynthConfig::default()
    };
    assert!(oracle_codebook(&crowded).is_err());
}
