use proptest::prelude::*;
use rand::{Rng, SeedableRng};

use super::*;
use crate::datagen::{generate_corpus, normalize_image, AugmentConfig, SceneSpec};
use crate::encoders::{ModelConfig, Vocabulary};

fn bx(x: usize, y: usize, width: usize, height: usize) -> BoxAnnotation {
    BoxAnnotation {
        x,
        y,
        width,
        height,
        label: "t".into(),
    }
}

fn indicator(h: usize, w: usize, boxes: &[BoxAnnotation]) -> Tensor {
    let m = union_mask(boxes, h, w);
    Tensor::matrix(h, w, m.iter().map(|&b| b as u8 as f64).collect()).unwrap()
}

fn random_map(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Tensor {
    Tensor::matrix(h, w, (0..h * w).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
}

fn brute_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for (i, &li) in labels.iter().enumerate() {
        for (j, &lj) in labels.iter().enumerate() {
            if li && !lj {
                den += 1.0;
                num += if scores[i] > scores[j] {
                    1.0
                } else if scores[i] == scores[j] {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    num / den
}

fn cnr_oracle(map: &Tensor, b: &BoxAnnotation) -> f64 {
    let (h, w) = (map.shape()[0], map.shape()[1]);
    let (mut si, mut ni, mut so, mut no) = (0.0, 0.0, 0.0, 0.0);
    for y in 0..h {
        for x in 0..w {
            let inside = x >= b.x && x < b.x + b.width && y >= b.y && y < b.y + b.height;
            if inside {
                si += map.at(y, x);
                ni += 1.0;
            } else {
                so += map.at(y, x);
                no += 1.0;
            }
        }
    }
    let (mi, mo) = (si / ni, so / no);
    let (mut vi, mut vo) = (0.0, 0.0);
    for y in 0..h {
        for x in 0..w {
            let inside = x >= b.x && x < b.x + b.width && y >= b.y && y < b.y + b.height;
            if inside {
                vi += (map.at(y, x) - mi).powi(2) / ni;
            } else {
                vo += (map.at(y, x) - mo).powi(2) / no;
            }
        }
    }
    (mi - mo) / (vi + vo + 1e-12).sqrt()
}

#[test]
fn box_validation() {
    assert!(bx(0, 0, 0, 3).validate(8, 8).is_err());
    assert!(bx(6, 0, 3, 3).validate(8, 8).is_err());
    assert!(bx(5, 5, 3, 3).validate(8, 8).is_ok());
    assert!(bx(2, 3, 2, 2).contains(3, 2));
    assert!(!bx(2, 3, 2, 2).contains(5, 2));
}

#[test]
fn cnr_cases() {
    let flat = Tensor::full(&[6, 6], 0.25);
    assert_eq!(metric_cnr(&flat, &bx(1, 1, 2, 2)).unwrap(), 0.0);
    let b = bx(1, 1, 2, 2);
    let v = metric_cnr(&indicator(6, 6, std::slice::from_ref(&b)), &b).unwrap();
    assert!(v.is_finite() && v > 1e5);
    assert!(matches!(metric_cnr(&flat, &bx(0, 0, 6, 6)), Err(Error::Metric(_))));
}

#[test]
fn cnr_matches_scalar_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..100 {
        let map = random_map(&mut rng, 9, 7);
        let b = bx(rng.random_range(0..4), rng.random_range(0..5), rng.random_range(1..4), rng.random_range(1..5));
        assert!((metric_cnr(&map, &b).unwrap() - cnr_oracle(&map, &b)).abs() < 1e-12);
    }
}

#[test]
fn miou_cases() {
    let b = bx(2, 2, 3, 2);
    let map = indicator(10, 10, std::slice::from_ref(&b));
    assert_eq!(metric_miou(&map, std::slice::from_ref(&b), &MIOU_THRESHOLDS).unwrap(), 1.0);
    let far = indicator(10, 10, &[bx(7, 7, 2, 2)]);
    assert_eq!(metric_miou(&far, std::slice::from_ref(&b), &MIOU_THRESHOLDS).unwrap(), 0.0);
    // Predicted 4×2 block overlaps the 4×2 box in a 2×2 square: IoU 4 / 12.
    let half = indicator(10, 10, &[bx(4, 0, 4, 2)]);
    let got = metric_miou(&half, &[bx(2, 0, 4, 2)], &MIOU_THRESHOLDS).unwrap();
    assert!((got - 4.0 / 12.0).abs() < 1e-15);
    assert!(matches!(metric_miou(&map, &[b], &[]), Err(Error::Parameter { .. })));
}

#[test]
fn miou_matches_scalar_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..100 {
        let map = random_map(&mut rng, 8, 8);
        let boxes = vec![bx(rng.random_range(0..5), rng.random_range(0..5), 3, 3), bx(rng.random_range(0..6), 0, 2, 4)];
        let mut sorted = map.data().to_vec();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut total = 0.0;
        for q in MIOU_THRESHOLDS {
            let cut = sorted[(q * 63.0) as usize];
            let (mut i, mut u) = (0.0, 0.0);
            for y in 0..8 {
                for x in 0..8 {
                    let p = map.at(y, x) > cut;
                    let t = boxes.iter().any(|b| b.contains(y, x));
                    if p && t {
                        i += 1.0;
                    }
                    if p || t {
                        u += 1.0;
                    }
                }
            }
            total += i / u;
        }
        let got = metric_miou(&map, &boxes, &MIOU_THRESHOLDS).unwrap();
        assert!((got - total / 5.0).abs() < 1e-12);
    }
}

#[test]
fn pointing_game_cases() {
    let mut map = Tensor::zeros(&[8, 8]);
    map.data_mut()[3 * 8 + 4] = 1.0;
    assert!(metric_pointing_game(&map, &[bx(3, 2, 3, 3)]).unwrap());
    assert!(!metric_pointing_game(&map, &[bx(0, 0, 2, 2)]).unwrap());
    let flat = Tensor::full(&[8, 8], 0.2);
    assert!(metric_pointing_game(&flat, &[bx(0, 0, 1, 1)]).unwrap());
    assert!(!metric_pointing_game(&flat, &[bx(1, 0, 1, 1)]).unwrap());
}

#[test]
fn pointing_game_matches_scalar_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..100 {
        let map = random_map(&mut rng, 8, 8);
        let b = bx(rng.random_range(0..5), rng.random_range(0..5), 3, 3);
        let (mut by, mut bx_, mut best) = (0, 0, f64::NEG_INFINITY);
        for y in 0..8 {
            for x in 0..8 {
                if map.at(y, x) > best {
                    best = map.at(y, x);
                    by = y;
                    bx_ = x;
                }
            }
        }
        assert_eq!(metric_pointing_game(&map, std::slice::from_ref(&b)).unwrap(), b.contains(by, bx_));
    }
}

#[test]
fn auc_cases() {
    assert_eq!(metric_auc(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]).unwrap(), 1.0);
    assert_eq!(metric_auc(&[0.5; 4], &[false, true, false, true]).unwrap(), 0.5);
    let s = [0.3, 0.7, 0.5, 0.7, 0.1, 0.9];
    let l = [false, true, true, false, false, true];
    assert_eq!(metric_auc(&s, &l).unwrap(), brute_auc(&s, &l));
    assert!(matches!(metric_auc(&[0.1, 0.2], &[true, true]), Err(Error::Metric(_))));
}

#[test]
fn random_baseline_counts_overlapping_patches() {
    assert_eq!(random_patch_baseline(&[bx(0, 0, 8, 8)], 64, 8), 1.0 / 64.0);
    assert_eq!(random_patch_baseline(&[bx(4, 4, 8, 8)], 64, 8), 4.0 / 64.0);
}

#[test]
fn weight_map_of_fresh_head_is_uniform() {
    let wm = export_weight_map(&[0.0; 64], 0.02).unwrap();
    assert_eq!(wm.side, 8);
    assert!(wm.values.data().iter().all(|&v| (v - 1.0 / 64.0).abs() < 1e-15));
    assert!(export_weight_map(&[0.0; 63], 0.02).is_err());
    assert!(weight_softmax(&[0.0; 4], 0.0).is_err());
}

#[test]
fn central_and_border_split() {
    let mut w = vec![0.0; 64];
    for &i in &[27, 28, 35, 36] {
        w[i] = 1.0;
    }
    let (c, b) = central_and_border_means(&w, 64, 8).unwrap();
    assert_eq!((c, b), (1.0, 0.0));
}

#[test]
fn zero_shot_limits() {
    let one = |v: Vec<f64>| Tensor::matrix(1, v.len(), v).unwrap();
    let img = ImageFeatures {
        n_patches: 1,
        tokens: one(vec![1.0, 0.0]),
        patch_proj: one(vec![1.0, 0.0]),
        pooled: one(vec![1.0, 0.0]),
        embedding: one(vec![1.0, 0.0]),
    };
    let prompts = |pos: [f64; 2], neg: [f64; 2]| {
        let e = Tensor::from_rows(&[pos.to_vec(), neg.to_vec()]).unwrap();
        TextFeatures {
            cls: e.clone(),
            cls_proj: e.clone(),
            embedding: e,
        }
    };
    let same = zero_shot_scores(&img, &prompts([0.6, 0.8], [0.6, 0.8]), 0.03).unwrap();
    assert_eq!(same.item(), 0.5);
    let aligned = zero_shot_scores(&img, &prompts([1.0, 0.0], [0.0, 1.0]), 0.01).unwrap();
    assert!(aligned.item() > 1.0 - 1e-12);
    let missing = [PromptPair {
        class: "disc".into(),
        positive: "there is a disc".into(),
        negative: " ".into(),
    }];
    assert!(matches!(prompt_texts(&missing), Err(Error::Input(_))));
}

#[test]
fn per_class_auc_names_missing_class() {
    let scores = Tensor::matrix(2, 2, vec![0.1, 0.2, 0.3, 0.4]).unwrap();
    let labels = vec![vec![true, false], vec![false, false]];
    let err = per_class_auc(&scores, &labels, &["a".into(), "b".into()]).unwrap_err();
    assert!(err.to_string().contains("class b"));
}

fn small_setup() -> (MacoModel, Vec<Image>, Vec<Vec<bool>>) {
    let m = MacoModel::new(ModelConfig::default(), Vocabulary::synthetic(), 4).unwrap();
    let corpus = generate_corpus(&SceneSpec::default(), 48, 9).unwrap();
    let aug = AugmentConfig::default();
    let images = corpus.iter().map(|s| normalize_image(&s.image, &aug)).collect();
    let labels = corpus.iter().map(|s| s.labels.to_vec()).collect();
    (m, images, labels)
}

#[test]
fn grounding_map_shape_and_uniform_head() {
    let (m, images, _) = small_setup();
    let g = grounding_map(&m, &images[0], "there is a disc", &GroundingConfig::default()).unwrap();
    assert_eq!(g.scores.shape(), &[64, 64]);
    assert_eq!(g.grid_side, 8);
    assert!(g.scores.is_finite());
    let bad = GroundingConfig {
        tau_w: 0.0,
        ..GroundingConfig::default()
    };
    assert!(grounding_map(&m, &images[0], "there is a disc", &bad).is_err());
}

#[test]
fn grounding_peak_survives_text_rescaling() {
    let (m, images, _) = small_setup();
    let img = image_features(&m, &images[..3]).unwrap();
    let txt = text_features(&m, &["there is a ring in the left region."]).unwrap();
    let scaled = TextFeatures {
        cls: txt.cls.map(|v| 3.7 * v),
        cls_proj: txt.cls_proj.map(|v| 3.7 * v),
        embedding: txt.embedding.clone(),
    };
    for space in [GroundingSpace::Raw, GroundingSpace::Projected] {
        let cfg = GroundingConfig {
            space,
            ..GroundingConfig::default()
        };
        for i in 0..3 {
            let a = grounding_from_features(&img, i, &txt, 0, m.importance_weights(), &cfg, 64, "p").unwrap();
            let b = grounding_from_features(&img, i, &scaled, 0, m.importance_weights(), &cfg, 64, "p").unwrap();
            assert_eq!(argmax_first(a.scores.data()), argmax_first(b.scores.data()));
        }
    }
}

#[test]
fn features_match_single_image_path() {
    let (m, images, _) = small_setup();
    let batch = image_features(&m, &images[..2]).unwrap();
    let single = image_features(&m, &images[1..2]).unwrap();
    assert_eq!(batch.embedding.row(1), single.embedding.row(0));
}

#[test]
fn probe_with_zero_epochs() {
    let (m, images, labels) = small_setup();
    let names: Vec<String> = ObjectClass::ALL.iter().map(|c| c.name().to_string()).collect();
    let cfg = ProbeConfig {
        epochs: 0,
        ..ProbeConfig::default()
    };
    let (_, auc) = linear_probe(&m, (&images[..32], &labels[..32]), (&images[32..], &labels[32..]), &names, &cfg).unwrap();
    assert!(auc.per_class.iter().all(|(_, a)| *a == 0.5));
}

#[test]
fn probe_learns_separable_features() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let n = 80;
    let labels: Vec<Vec<bool>> = (0..n).map(|i| vec![i % 2 == 0, i % 3 == 0]).collect();
    let feats: Vec<f64> = labels
        .iter()
        .flat_map(|l| {
            let a = if l[0] { 1.0 } else { -1.0 };
            let b = if l[1] { 1.0 } else { -1.0 };
            vec![a + 0.1 * rng.random::<f64>(), b + 0.1 * rng.random::<f64>(), rng.random()]
        })
        .collect();
    let x = Tensor::matrix(n, 3, feats).unwrap();
    let probe = train_linear_probe(&x, &labels, &ProbeConfig::default()).unwrap();
    let auc = per_class_auc(&probe.scores(&x).unwrap(), &labels, &["a".into(), "b".into()]).unwrap();
    assert_eq!(auc.macro_auc, 1.0);
}

#[test]
fn probe_rejects_single_class_training_data() {
    let x = Tensor::zeros(&[3, 2]);
    let labels = vec![vec![true], vec![true], vec![true]];
    assert!(matches!(train_linear_probe(&x, &labels, &ProbeConfig::default()), Err(Error::Input(_))));
}

#[test]
fn csv_outputs() {
    let dir = std::env::temp_dir().join(format!("maco-infer-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let rows = vec![GroundingRow {
        phrase: "a, b".into(),
        cnr: 1.5,
        miou: 0.25,
        pg: 1,
    }];
    write_csv(&dir.join("m.csv"), &rows).unwrap();
    let text = std::fs::read_to_string(dir.join("m.csv")).unwrap();
    assert_eq!(text, "phrase,cnr,miou,pg\n\"a, b\",1.5,0.25,1\n");
    write_matrix_csv(&dir.join("w.csv"), &Tensor::matrix(1, 2, vec![0.5, 0.25]).unwrap()).unwrap();
    assert_eq!(std::fs::read_to_string(dir.join("w.csv")).unwrap(), "5e-1,2.5e-1\n");
    std::fs::remove_dir_all(dir).unwrap();
}

proptest! {
    #[test]
    fn auc_equals_pair_counting(
        pairs in prop::collection::vec((0u8..6, any::<bool>()), 2..=20)
    ) {
        let scores: Vec<f64> = pairs.iter().map(|p| p.0 as f64 / 5.0).collect();
        let labels: Vec<bool> = pairs.iter().map(|p| p.1).collect();
        prop_assume!(labels.iter().any(|&l| l) && labels.iter().any(|&l| !l));
        prop_assert_eq!(metric_auc(&scores, &labels).unwrap(), brute_auc(&scores, &labels));
    }

    #[test]
    fn cnr_affine_invariant(seed in 0u64..500, a in 0.1f64..10.0, b in -5.0f64..5.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let map = random_map(&mut rng, 8, 8);
        let bb = bx(2, 1, 3, 4);
        let base = metric_cnr(&map, &bb).unwrap();
        let moved = metric_cnr(&map.map(|v| a * v + b), &bb).unwrap();
        prop_assert!((base - moved).abs() < 1e-9);
    }

    #[test]
    fn miou_monotone_invariant(seed in 0u64..500) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let map = random_map(&mut rng, 8, 8);
        let boxes = [bx(1, 2, 4, 3)];
        let base = metric_miou(&map, &boxes, &MIOU_THRESHOLDS).unwrap();
        let moved = metric_miou(&map.map(|v| v.exp() * 3.0 - 1.0), &boxes, &MIOU_THRESHOLDS).unwrap();
        prop_assert_eq!(base, moved);
    }

    #[test]
    fn weight_map_is_distribution(w in prop::collection::vec(-3.0f64..3.0, 16), tau in 0.005f64..2.0) {
        let m = export_weight_map(&w, tau).unwrap();
        prop_assert!(m.values.data().iter().all(|&v| v >= 0.0));
        prop_assert!((m.values.sum() - 1.0).abs() < 1e-12);
    }
}
