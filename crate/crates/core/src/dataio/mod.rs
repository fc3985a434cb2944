//! Dataset files, padding and subsampling, synthetic data and label statistics.
//!
//! A dataset file is JSON lines: a [`DatasetManifest`] on line 1, then one
//! object per video with `id`, `labels` and `frames` (a list of rows).

mod analysis;
mod format;
mod synth;

pub use analysis::{cooccurrence_matrix, label_distribution, Cooccurrence, LabelDistribution};
pub use format::{
    format_predictions, infer_num_classes, pad_or_truncate, parse_predictions, read_predictions, read_records, subsample,
    write_predictions, write_records, Dataset, DatasetManifest, FeatureScaling, FrameRecord, RecordReader,
    DEFAULT_MAX_LEN, FORMAT_NAME, FORMAT_VERSION, PREDICTION_HEADER,
};
pub use synth::{synth_generate, SynthConfig, SynthData, PATTERN, SIGNAL};

#[cfg(test)]
mod tests {
    use std::io::Cursor;

    use proptest::prelude::*;
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::metrics::{gap_at_k, PredictionSet};
    use crate::numcore::Array;

    fn random_record(i: usize, v: usize, d: usize, rng: &mut ChaCha8Rng) -> FrameRecord {
        let t = rng.random_range(1..6);
        let mut labels: Vec<usize> = (0..v).filter(|_| rng.random_bool(0.3)).collect();
        if labels.is_empty() {
            labels.push(rng.random_range(0..v));
        }
        let data = (0..t * d).map(|_| rng.random::<f64>() * 20.0 - 10.0).collect();
        FrameRecord {
            id: format!("r{i}"),
            labels,
            frames: Array::new(vec![t, d], data).unwrap(),
        }
    }

    fn temp_path(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join(format!("vidtag-dataio-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    #[test]
    fn write_then_read_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let records: Vec<FrameRecord> = (0..100).map(|i| random_record(i, 7, 3, &mut rng)).collect();
        let path = temp_path("roundtrip.jsonl");
        let manifest = DatasetManifest::new(7, 3, "train");
        write_records(&path, &manifest, &records).unwrap();
        let (m, back) = read_records(&path).unwrap();
        assert_eq!(m.records, 100);
        assert_eq!(back, records);
    }

    #[test]
    fn manifest_only_file_is_empty() {
        let path = temp_path("empty.jsonl");
        write_records(&path, &DatasetManifest::new(3, 2, "test"), &[]).unwrap();
        assert!(read_records(&path).unwrap().1.is_empty());
    }

    fn parse_one(body: &str) -> crate::Result<Vec<FrameRecord>> {
        let manifest = r#"{"format":"vidtag-frames","version":1,"num_classes":3,"feature_dim":2,"max_len":300,"records":1,"split":"x"}"#;
        let text = format!("{manifest}\n{body}\n");
        RecordReader::new(Cursor::new(text), "mem")?.collect()
    }

    #[test]
    fn malformed_records_report_line() {
        assert!(parse_one(r#"{"id":"a","labels":[0,2],"frames":[[1,2],[3,4]]}"#).is_ok());
        for bad in [
            r#"{"id":"a","labels":[3],"frames":[[1,2]]}"#,
            r#"{"id":"a","labels":[],"frames":[[1,2]]}"#,
            r#"{"id":"a","labels":[1,1],"frames":[[1,2]]}"#,
            r#"{"id":"a","labels":[0],"frames":[[1,2,3]]}"#,
            r#"{"id":"a","labels":[0],"frames":[]}"#,
            r#"{"id":"a","labels":[0],"frames":[[1,2]],"extra":1}"#,
            r#"{"id":"a","labels":[0],"frames":[[1,2]"#,
        ] {
            match parse_one(bad) {
                Err(crate::Error::Parse { line, .. }) => assert_eq!(line, 2, "{bad}"),
                other => panic!("{bad}: {other:?}"),
            }
        }
        let short = r#"{"format":"vidtag-frames","version":1,"num_classes":3,"feature_dim":2,"max_len":300,"records":2,"split":"x"}"#;
        let got: crate::Result<Vec<_>> = RecordReader::new(Cursor::new(format!("{short}\n")), "mem").unwrap().collect();
        assert!(got.is_err());
        assert!(RecordReader::new(Cursor::new("{}\n"), "mem").is_err());
    }

    #[test]
    fn write_rejects_invalid_records() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut r = random_record(0, 3, 2, &mut rng);
        r.labels = vec![5];
        assert!(write_records(temp_path("bad.jsonl"), &DatasetManifest::new(3, 2, "x"), &[r]).is_err());
    }

    #[test]
    fn pad_and_truncate() {
        let rec = |t: usize| FrameRecord {
            id: "x".into(),
            labels: vec![0],
            frames: Array::new(vec![t, 2], (0..2 * t).map(|v| v as f64 + 1.0).collect()).unwrap(),
        };
        let full = rec(300);
        assert_eq!(pad_or_truncate(&full, 300).unwrap(), (full.frames.clone(), 300));
        let (padded, len) = pad_or_truncate(&rec(2), 4).unwrap();
        assert_eq!(len, 2);
        assert_eq!(padded.data(), &[1., 2., 3., 4., 0., 0., 0., 0.]);
        let (cut, len) = pad_or_truncate(&rec(5), 3).unwrap();
        assert_eq!((cut.data(), len), (&[1., 2., 3., 4., 5., 6.][..], 3));
        assert!(pad_or_truncate(&rec(2), 0).is_err());
    }

    #[test]
    fn subsample_examples() {
        let rec = |t: usize| FrameRecord {
            id: "x".into(),
            labels: vec![0],
            frames: Array::new(vec![t, 1], (0..t).map(|v| v as f64).collect()).unwrap(),
        };
        assert_eq!(subsample(&rec(4), 1).unwrap(), rec(4));
        assert_eq!(subsample(&rec(6), 2).unwrap().len(), 3);
        assert_eq!(subsample(&rec(5), 3).unwrap().frames.data(), &[0.0, 3.0]);
        assert!(subsample(&rec(5), 0).is_err());
    }

    #[test]
    fn dataset_prepare_scales_and_truncates() {
        let mut m = DatasetManifest::new(2, 1, "x");
        m.max_len = 2;
        m.scaling = Some(FeatureScaling {
            mean: vec![1.0],
            std: vec![2.0],
        });
        let rec = FrameRecord {
            id: "a".into(),
            labels: vec![1],
            frames: Array::new(vec![3, 1], vec![1.0, 3.0, 5.0]).unwrap(),
        };
        let ds = Dataset::prepare(m, vec![rec]);
        assert_eq!(ds.records[0].frames.data(), &[0.0, 1.0]);
    }

    #[test]
    fn prediction_csv_roundtrip_and_cap() {
        let pred = PredictionSet::new(vec!["a".into(), "b".into()], 3, vec![0.1, 0.7, 0.3, 0.25, 0.5, 1.0 / 3.0]).unwrap();
        let csv = format_predictions(&pred, 20);
        assert_eq!(
            csv,
            "VideoId,LabelConfidencePairs\na,1 0.7 2 0.3 0 0.1\nb,1 0.5 2 0.3333333333333333 0 0.25\n"
        );
        assert_eq!(parse_predictions(&csv, 3, "x").unwrap(), pred);
        let top1 = parse_predictions(&format_predictions(&pred, 1), 3, "x").unwrap();
        assert_eq!(top1, pred.truncate_top_k(1));
        let labels = vec![vec![1], vec![2]];
        assert_eq!(gap_at_k(&top1, &labels, 1).unwrap(), gap_at_k(&pred.truncate_top_k(1), &labels, 1).unwrap());
        let empty = PredictionSet::new(vec![], 3, vec![]).unwrap();
        assert_eq!(format_predictions(&empty, 20), "VideoId,LabelConfidencePairs\n");
        assert!(parse_predictions("VideoId,LabelConfidencePairs\na,5 0.1\n", 3, "x").is_err());
        assert!(parse_predictions("VideoId,LabelConfidencePairs\na,1\n", 3, "x").is_err());
        assert!(parse_predictions("nope\n", 3, "x").is_err());
        assert_eq!(infer_num_classes(&csv), 3);
    }

    #[test]
    fn label_distribution_cases() {
        let uniform: Vec<Vec<usize>> = (0..12).map(|i| vec![i % 4]).collect();
        let d = label_distribution(&uniform, 4).unwrap();
        assert_eq!(d.counts, vec![3, 3, 3, 3]);
        assert_eq!(d.coverage, vec![0.0, 0.25, 0.5, 0.75, 1.0]);
        let single = label_distribution(&[vec![2], vec![2]], 4).unwrap();
        assert_eq!(single.coverage, vec![0.0, 0.0, 0.0, 1.0, 1.0]);
        assert!(single.csv().starts_with("class_id,count,coverage\n0,0,0\n"));
        assert!(label_distribution(&[vec![4]], 4).is_err());
    }

    #[test]
    fn cooccurrence_cases() {
        let disjoint = vec![vec![0], vec![1], vec![1], vec![2]];
        let m = cooccurrence_matrix(&disjoint, 3, 3).unwrap();
        assert_eq!(m.classes, vec![1, 0, 2]);
        for a in 0..3 {
            for b in 0..3 {
                assert_eq!(m.get(a, b) > 0, a == b);
            }
        }
        let pairs = vec![vec![0, 1]; 5];
        let m = cooccurrence_matrix(&pairs, 4, 2).unwrap();
        assert_eq!(m.counts, vec![5, 5, 5, 5]);
        assert!(cooccurrence_matrix(&pairs, 4, 5).is_err());
        assert!(m.csv().starts_with("class_id,0,1\n0,5,5\n"));
    }

    #[test]
    fn cooccurrence_matches_nested_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let v = 9;
        let labels: Vec<Vec<usize>> = (0..60).map(|_| (0..v).filter(|_| rng.random_bool(0.3)).collect()).collect();
        let m = cooccurrence_matrix(&labels, v, 5).unwrap();
        for (i, &a) in m.classes.iter().enumerate() {
            for (j, &b) in m.classes.iter().enumerate() {
                let want = labels.iter().filter(|s| s.contains(&a) && s.contains(&b)).count();
                assert_eq!(m.get(i, j), want);
            }
        }
    }

    fn small_synth(seed: u64) -> SynthConfig {
        SynthConfig::new(12, 200, (4, 9), 8, seed)
    }

    #[test]
    fn synth_is_deterministic() {
        let a = synth_generate(&small_synth(5)).unwrap();
        let b = synth_generate(&small_synth(5)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.train, synth_generate(&small_synth(6)).unwrap().train);
        assert_eq!((a.train.len(), a.val.len(), a.test.len()), (160, 20, 20));
        let dims = |r: &FrameRecord| r.frames.cols() == 8 && (4..=9).contains(&r.len()) && r.validate(12, 8).is_ok();
        assert!(a.train.iter().chain(&a.val).chain(&a.test).all(dims));
    }

    #[test]
    fn synth_config_problems_reported_together() {
        let mut cfg = small_synth(1);
        cfg.min_len = 0;
        cfg.temporal_fraction = 2.0;
        cfg.split = [0.5, 0.5, 0.5];
        match synth_generate(&cfg) {
            Err(crate::Error::Config(p)) => assert_eq!(p.len(), 4),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn static_labels_follow_mean_frame_threshold() {
        // difficulty 0: a class is on exactly when its planted direction in the mean exceeds SIGNAL/2,
        // so labels are a deterministic function of the mean frame
        let data = synth_generate(&small_synth(7)).unwrap();
        let mut by_mean: Vec<(Vec<f64>, Vec<usize>)> = data.train.iter().map(|r| (r.mean_frame().into_data(), r.labels.clone())).collect();
        by_mean.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        assert!(by_mean.windows(2).all(|w| w[0].0 != w[1].0 || w[0].1 == w[1].1));
    }

    #[test]
    fn power_law_concentrates_positives() {
        let mut cfg = SynthConfig::new(500, 1500, (2, 3), 500, 8);
        cfg.split = [1.0, 0.0, 0.0];
        let data = synth_generate(&cfg).unwrap();
        let dist = label_distribution(&data.train.iter().map(|r| r.labels.clone()).collect::<Vec<_>>(), 500).unwrap();
        let mut counts = dist.counts.clone();
        counts.sort_unstable_by(|a, b| b.cmp(a));
        let total: usize = counts.iter().sum();
        let top: usize = counts[..5].iter().sum();
        assert!(top * 2 > total, "top 1% hold {top} of {total}");
    }

    #[test]
    fn temporal_decoys_balance_pattern_presence() {
        let mut cfg = SynthConfig::new(6, 3000, (10, 20), 16, 9);
        cfg.temporal_fraction = 0.5;
        cfg.split = [1.0, 0.0, 0.0];
        assert_eq!((0..6).filter(|&c| cfg.is_temporal(c)).collect::<Vec<_>>(), vec![1, 3, 5]);
        let data = synth_generate(&cfg).unwrap();
        let pos = data.train.iter().filter(|r| r.labels.contains(&1)).count() as f64;
        assert!(pos > 100.0);
    }

    proptest! {
        #[test]
        fn subsample_strides_compose(t in 1usize..40, a in 1usize..5, b in 1usize..5) {
            let rec = FrameRecord {
                id: "x".into(),
                labels: vec![0],
                frames: Array::new(vec![t, 1], (0..t).map(|v| v as f64).collect()).unwrap(),
            };
            let twice = subsample(&subsample(&rec, a).unwrap(), b).unwrap();
            prop_assert_eq!(twice, subsample(&rec, a * b).unwrap());
        }

        #[test]
        fn record_text_roundtrip(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let records: Vec<FrameRecord> = (0..5).map(|i| random_record(i, 4, 2, &mut rng)).collect();
            let path = temp_path(&format!("prop-{seed}.jsonl"));
            write_records(&path, &DatasetManifest::new(4, 2, "p"), &records).unwrap();
            let back = read_records(&path).unwrap().1;
            std::fs::remove_file(&path).ok();
            prop_assert_eq!(back, records);
        }

        #[test]
        fn cooccurrence_symmetric_and_bounded(seed in any::<u64>(), v in 1usize..8) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let labels: Vec<Vec<usize>> = (0..30).map(|_| (0..v).filter(|_| rng.random_bool(0.4)).collect()).collect();
            let m = cooccurrence_matrix(&labels, v, v).unwrap();
            for a in 0..v {
                for b in 0..v {
                    prop_assert_eq!(m.get(a, b), m.get(b, a));
                    prop_assert!(m.get(a, b) <= m.get(a, a).min(m.get(b, b)));
                }
            }
        }
    }
}
