use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use stemflow::corpus::{build_corpus, CorpusConfig, Dataset, StemType, NUM_STEM_TYPES};

fn files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.insert(rel, fs::read(&path).unwrap());
            }
        }
    }
    out
}

/// Probability that each type is among `count` draws taken one at a time
/// without replacement, each draw proportional to the remaining weights.
fn inclusion(weights: &[f64; NUM_STEM_TYPES], count: usize) -> [f64; NUM_STEM_TYPES] {
    fn walk(weights: &[f64], taken: u32, left: usize, p: f64, acc: &mut [f64]) {
        if left == 0 {
            return;
        }
        let total: f64 = (0..weights.len()).filter(|i| taken & (1 << i) == 0).map(|i| weights[i]).sum();
        for i in (0..weights.len()).filter(|i| taken & (1 << i) == 0) {
            let q = p * weights[i] / total;
            acc[i] += q;
            walk(weights, taken | (1 << i), left - 1, q, acc);
        }
    }
    let mut acc = [0.0; NUM_STEM_TYPES];
    walk(weights, 0, count, 1.0, &mut acc);
    acc
}

#[test]
fn inclusion_oracle_sanity() {
    let p = inclusion(&[1.0; NUM_STEM_TYPES], 3);
    assert!(p.iter().all(|x| (x - 0.5).abs() < 1e-12));
    let all = inclusion(&[1.6, 1.4, 1.0, 0.9, 0.8, 0.8], NUM_STEM_TYPES);
    assert!(all.iter().all(|x| (x - 1.0).abs() < 1e-12));
}

#[test]
fn type_histogram_matches_configured_weights() {
    let config = CorpusConfig::default();
    assert_eq!(config.compositions, 512);
    let dir = tempfile::tempdir().unwrap();
    let (_, summary) = build_corpus(&config, dir.path()).unwrap();
    let counts = config.max_stems - config.min_stems + 1;
    let mut expected = [0.0; NUM_STEM_TYPES];
    for k in config.min_stems..=config.max_stems {
        for (e, p) in expected.iter_mut().zip(inclusion(&config.type_weights, k)) {
            *e += p * config.compositions as f64 / counts as f64;
        }
    }
    for t in StemType::ALL {
        let got = summary.type_histogram[t.index()] as f64;
        let want = expected[t.index()];
        assert!((got - want).abs() <= 0.1 * want, "{t}: {got} vs {want:.1}");
    }
}

#[test]
fn same_seed_builds_identical_files() {
    let config = CorpusConfig {
        compositions: 24,
        ..CorpusConfig::default()
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    build_corpus(&config, a.path()).unwrap();
    build_corpus(&config, b.path()).unwrap();
    let (fa, fb) = (files(a.path()), files(b.path()));
    assert!(fa.len() > 24);
    assert_eq!(fa, fb);

    let c = tempfile::tempdir().unwrap();
    build_corpus(&CorpusConfig { seed: 1, ..config }, c.path()).unwrap();
    assert_ne!(files(c.path())["manifest.jsonl"], fa["manifest.jsonl"]);
}

#[test]
fn single_composition_manifest() {
    let config = CorpusConfig {
        compositions: 1,
        ..CorpusConfig::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let (dataset, summary) = build_corpus(&config, dir.path()).unwrap();
    let manifest = fs::read_to_string(dir.path().join("manifest.jsonl")).unwrap();
    assert_eq!(manifest.lines().count(), 1);
    assert!((3..=8).contains(&summary.stems));
    let record: serde_json::Value = serde_json::from_str(manifest.lines().next().unwrap()).unwrap();
    assert_eq!(record["stems"].as_array().unwrap().len(), summary.stems);

    let loaded = Dataset::load(dir.path()).unwrap();
    assert_eq!(loaded.len(), 1);
    assert_eq!(loaded.compositions[0].latents, dataset.compositions[0].latents);
    assert_eq!(loaded.compositions[0].masks, dataset.compositions[0].masks);
}
