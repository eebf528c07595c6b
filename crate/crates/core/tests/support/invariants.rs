//! One property check per module invariant, driven through the public API.
//!
//! Every check is deterministic: proptest runs from a fixed RNG and the
//! scenario-based checks use fixed seeds.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use owd::assignment::{hungarian, CostMatrix};
use owd::detector::{
    assign_targets, decode, detection_loss, DetectorConfig, Instance, Label, Network,
};
use owd::embed_transfer::{
    similarity_matrix, transfer_loss, LossKind, SimilarityMatrix, SimilarityRole, TransferConfig,
};
use owd::evaluation::{
    average_precision, clustering_quality, nmi, unknown_recall, DetectionResult, GtObject,
};
use owd::geometry::{giou, iou, mask_to_box, nms, BBox, BinaryMask};
use owd::synthdata::{
    generate_scene, generate_scenes, generate_sequence, serialize_dataset, Dataset, OracleTeacher,
    SceneSpec, SegmenterConfig, Split, DEFAULT_MAX_SPEED,
};
use owd::tracker::{run_detections, Tracker, TrackerConfig};
use owd::trainer::{
    batch_gradient, train, train_step, Active, Optimizer, Sample, TrainConfig, TrainData,
};
use owd::unknown_refine::{
    build_pseudo_targets, refine_loss, refine_loss_dense, select_unknown_candidates, PseudoPair,
    RefineConfig, KNOWN_OVERLAP_IOU,
};
use proptest::collection::vec;
use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestRng, TestRunner};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{detection_grad_error, unit};

pub type Check = fn() -> Result<(), String>;

pub const ALL: &[(&str, Check)] = &[
    (
        "geometry::iou_symmetric_bounded_reflexive",
        iou_symmetric_bounded_reflexive,
    ),
    (
        "geometry::giou_below_iou_equal_when_nested",
        giou_below_iou_equal_when_nested,
    ),
    ("geometry::mask_to_box_is_tight", mask_to_box_is_tight),
    (
        "geometry::nms_permutation_invariant",
        nms_permutation_invariant,
    ),
    ("assignment::hungarian_beats_greedy", hungarian_beats_greedy),
    (
        "assignment::row_permutation_equivariant",
        row_permutation_equivariant,
    ),
    (
        "assignment::constant_shift_invariant",
        constant_shift_invariant,
    ),
    (
        "detector::decode_forward_deterministic",
        decode_forward_deterministic,
    ),
    (
        "detector::decoded_boxes_clamped_idempotently",
        decoded_boxes_clamped_idempotently,
    ),
    (
        "detector::detection_loss_positive_at_init",
        detection_loss_positive_at_init,
    ),
    (
        "detector::gradient_check_three_seeds",
        detector_gradient_check,
    ),
    (
        "unknown_refine::loss_zero_iff_exact",
        refine_loss_zero_iff_exact,
    ),
    (
        "unknown_refine::targets_avoid_known_boxes",
        targets_avoid_known_boxes,
    ),
    (
        "unknown_refine::pairs_grow_as_tau_iou_shrinks",
        pairs_grow_as_tau_iou_shrinks,
    ),
    (
        "unknown_refine::unmatched_candidates_get_no_gradient",
        unmatched_candidates_get_no_gradient,
    ),
    (
        "embed_transfer::loss_zero_iff_structure_matches",
        transfer_zero_iff_structure_matches,
    ),
    (
        "embed_transfer::rotation_invariant",
        transfer_rotation_invariant,
    ),
    (
        "embed_transfer::teacher_gets_no_gradient",
        teacher_gets_no_gradient,
    ),
    (
        "embed_transfer::row_kl_teacher_shift_invariant",
        row_kl_teacher_shift_invariant,
    ),
    (
        "synthdata::byte_deterministic",
        synthdata_byte_deterministic,
    ),
    (
        "synthdata::unknowns_in_images_not_in_targets",
        unknowns_in_images_not_in_targets,
    ),
    ("synthdata::track_ids_consistent", track_ids_consistent),
    ("evaluation::ap_monotone_in_top_true_positive", ap_monotone),
    ("evaluation::u_recall_monotone", u_recall_monotone),
    (
        "evaluation::nmi_label_permutation_invariant",
        nmi_permutation_invariant,
    ),
    ("evaluation::metrics_deterministic", metrics_deterministic),
    ("tracker::ids_never_reused", ids_never_reused),
    (
        "tracker::ema_embeddings_unit_norm",
        ema_embeddings_unit_norm,
    ),
    (
        "tracker::impossible_threshold_births_all",
        impossible_threshold_births_all,
    ),
    (
        "tracker::association_order_invariant",
        association_order_invariant,
    ),
    (
        "trainer::breakdown_finite_non_negative",
        breakdown_finite_non_negative,
    ),
    (
        "trainer::disabled_module_has_no_effect",
        disabled_module_has_no_effect,
    ),
    (
        "trainer::single_thread_deterministic",
        single_thread_deterministic,
    ),
    ("cli::commands_idempotent", cli_commands_idempotent),
    (
        "cli::exit_code_reflects_success",
        cli_exit_code_reflects_success,
    ),
];

fn check<S: Strategy>(
    cases: u32,
    strategy: S,
    test: impl Fn(S::Value) -> Result<(), TestCaseError>,
) -> Result<(), String> {
    let config = Config {
        cases,
        failure_persistence: None,
        ..Config::default()
    };
    let mut runner =
        TestRunner::new_with_rng(config, TestRng::deterministic_rng(RngAlgorithm::ChaCha));
    runner.run(&strategy, test).map_err(|e| e.to_string())
}

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn bbox() -> impl Strategy<Value = BBox> {
    (0.0..56.0f64, 0.0..56.0f64, 0.5..32.0f64, 0.5..32.0f64)
        .prop_map(|(x, y, w, h)| BBox::new(x, y, x + w, y + h))
}

// ---- geometry

fn iou_symmetric_bounded_reflexive() -> Result<(), String> {
    check(512, (bbox(), bbox()), |(a, b)| {
        let v = iou(&a, &b);
        prop_assert_eq!(v, iou(&b, &a));
        prop_assert!((0.0..=1.0).contains(&v));
        prop_assert_eq!(iou(&a, &a), 1.0);
        Ok(())
    })
}

fn giou_below_iou_equal_when_nested() -> Result<(), String> {
    let nested = (bbox(), 0.0..1.0f64, 0.0..1.0f64, 0.05..1.0f64, 0.05..1.0f64).prop_map(
        |(a, fx, fy, fw, fh)| {
            let (w, h) = (a.width() * fw, a.height() * fh);
            let x = a.x1 + fx * (a.width() - w);
            let y = a.y1 + fy * (a.height() - h);
            (a, BBox::new(x, y, x + w, y + h))
        },
    );
    check(512, (bbox(), bbox(), nested), |(a, b, (outer, inner))| {
        prop_assert!(giou(&a, &b) <= iou(&a, &b) + 1e-12);
        prop_assert!((giou(&outer, &inner) - iou(&outer, &inner)).abs() < 1e-12);
        Ok(())
    })
}

fn mask_to_box_is_tight() -> Result<(), String> {
    let mask = (1usize..12, 1usize..12)
        .prop_flat_map(|(h, w)| (Just(h), Just(w), vec(any::<bool>(), h * w), 0..h * w))
        .prop_map(|(h, w, mut cells, force)| {
            cells[force] = true;
            BinaryMask::from_cells(h, w, cells).unwrap()
        });
    check(512, mask, |m| {
        let b = mask_to_box(&m).unwrap();
        let on: Vec<(f64, f64)> = (0..m.height())
            .flat_map(|r| (0..m.width()).map(move |c| (r, c)))
            .filter(|&(r, c)| m.get(r, c))
            .map(|(r, c)| (r as f64, c as f64))
            .collect();
        for &(r, c) in &on {
            prop_assert!(b.x1 <= c && c + 1.0 <= b.x2 && b.y1 <= r && r + 1.0 <= b.y2);
        }
        // shrinking any edge by one cell drops a foreground cell
        prop_assert!(on.iter().any(|&(_, c)| c < b.x1 + 1.0));
        prop_assert!(on.iter().any(|&(r, _)| r < b.y1 + 1.0));
        prop_assert!(on.iter().any(|&(_, c)| c + 1.0 > b.x2 - 1.0));
        prop_assert!(on.iter().any(|&(r, _)| r + 1.0 > b.y2 - 1.0));
        Ok(())
    })
}

fn nms_permutation_invariant() -> Result<(), String> {
    let case = vec(bbox(), 1..14).prop_flat_map(|boxes| {
        let n = boxes.len();
        (
            Just(boxes),
            Just((0..n).collect::<Vec<_>>()).prop_shuffle(),
            Just((0..n).collect::<Vec<_>>()).prop_shuffle(),
        )
    });
    check(256, case, |(boxes, rank, perm)| {
        let scores: Vec<f64> = rank.iter().map(|&r| r as f64 / 16.0).collect();
        let mut kept: Vec<usize> = nms(&boxes, &scores, 0.4);
        let pb: Vec<BBox> = perm.iter().map(|&i| boxes[i]).collect();
        let ps: Vec<f64> = perm.iter().map(|&i| scores[i]).collect();
        let mut kept_p: Vec<usize> = nms(&pb, &ps, 0.4).into_iter().map(|k| perm[k]).collect();
        kept.sort();
        kept_p.sort();
        prop_assert_eq!(kept, kept_p);
        Ok(())
    })
}

// ---- assignment

fn cost_matrix() -> impl Strategy<Value = CostMatrix> {
    (1usize..7, 1usize..7)
        .prop_flat_map(|(r, c)| (Just(r), Just(c), vec(0.0..10.0f64, r * c)))
        .prop_map(|(r, c, d)| CostMatrix::new(r, c, d).unwrap())
}

fn greedy_total(c: &CostMatrix) -> f64 {
    let mut e: Vec<(f64, usize, usize)> = (0..c.rows())
        .flat_map(|r| (0..c.cols()).map(move |k| (r, k)))
        .map(|(r, k)| (c.get(r, k), r, k))
        .collect();
    e.sort_by(|a, b| a.0.total_cmp(&b.0));
    let (mut rows, mut cols) = (vec![false; c.rows()], vec![false; c.cols()]);
    let mut total = 0.0;
    for (v, r, k) in e {
        if !rows[r] && !cols[k] {
            rows[r] = true;
            cols[k] = true;
            total += v;
        }
    }
    total
}

fn hungarian_beats_greedy() -> Result<(), String> {
    check(512, cost_matrix(), |c| {
        let pairs = hungarian(&c);
        prop_assert_eq!(pairs.len(), c.rows().min(c.cols()));
        prop_assert!(c.total(&pairs) <= greedy_total(&c) + 1e-9);
        Ok(())
    })
}

fn row_permutation_equivariant() -> Result<(), String> {
    let case = cost_matrix().prop_flat_map(|c| {
        let rows = c.rows();
        (Just(c), Just((0..rows).collect::<Vec<_>>()).prop_shuffle())
    });
    check(512, case, |(c, perm)| {
        let p = CostMatrix::from_fn(c.rows(), c.cols(), |r, k| c.get(perm[r], k));
        let mut mapped: Vec<(usize, usize)> = hungarian(&p)
            .into_iter()
            .map(|(r, k)| (perm[r], k))
            .collect();
        mapped.sort();
        prop_assert_eq!(mapped, hungarian(&c));
        Ok(())
    })
}

fn constant_shift_invariant() -> Result<(), String> {
    check(512, (cost_matrix(), -20.0..20.0f64), |(c, shift)| {
        let s = CostMatrix::from_fn(c.rows(), c.cols(), |r, k| c.get(r, k) + shift);
        prop_assert_eq!(hungarian(&s), hungarian(&c));
        Ok(())
    })
}

// ---- detector

fn open_detector() -> DetectorConfig {
    DetectorConfig {
        score_thresh: 0.0,
        ..DetectorConfig::default()
    }
}

fn decode_forward_deterministic() -> Result<(), String> {
    let spec = SceneSpec::default();
    check(8, 0u64..1000, |seed| {
        let scene = generate_scene(seed, &spec).unwrap();
        let img = scene.image.to_float();
        let run = || {
            let net = Network::new(open_detector(), seed).unwrap();
            let (out, _) = net.forward(&img).unwrap();
            (decode(&out, &net.config), out)
        };
        let (a, oa) = run();
        let (b, ob) = run();
        prop_assert!(!a.is_empty());
        prop_assert_eq!(a, b);
        prop_assert_eq!(oa, ob);
        Ok(())
    })
}

fn decoded_boxes_clamped_idempotently() -> Result<(), String> {
    let spec = SceneSpec::default();
    check(8, 0u64..1000, |seed| {
        let scene = generate_scene(seed, &spec).unwrap();
        let net = Network::new(open_detector(), seed).unwrap();
        let (mut out, _) = net.forward(&scene.image.to_float()).unwrap();
        // blow up some offsets so that clamping is exercised
        out.box_offsets.mapv_inplace(|v| v * 40.0);
        for inst in decode(&out, &net.config) {
            let b = inst.bbox;
            prop_assert!(
                b.x1 >= 0.0 && b.y1 >= 0.0 && b.x2 <= 64.0 && b.y2 <= 64.0,
                "{:?}",
                b
            );
            prop_assert_eq!(b.clamp(64.0, 64.0), b);
        }
        Ok(())
    })?;
    let wild = (
        -100.0..100.0f64,
        -100.0..100.0f64,
        0.0..150.0f64,
        0.0..150.0f64,
    )
        .prop_map(|(x, y, w, h)| BBox::new(x, y, x + w, y + h));
    check(512, wild, |b| {
        let once = b.clamp(64.0, 48.0);
        prop_assert_eq!(once.clamp(64.0, 48.0), once);
        Ok(())
    })
}

fn detection_loss_positive_at_init() -> Result<(), String> {
    let spec = SceneSpec::default();
    let roster = spec.roster.clone();
    check(16, 0u64..1000, |seed| {
        let scene = generate_scene(seed, &spec).unwrap();
        let gt = scene.known_gt(&roster);
        let net = Network::new(DetectorConfig::default(), seed).unwrap();
        let (out, _) = net.forward(&scene.image.to_float()).unwrap();
        let l = detection_loss(&out, &assign_targets(&gt, out.grid(), out.stride)).unwrap();
        prop_assert!(l.objectness >= 0.0 && l.category >= 0.0 && l.bbox >= 0.0);
        if !gt.is_empty() {
            prop_assert!(l.total > 0.0);
        }
        Ok(())
    })
}

fn detector_gradient_check() -> Result<(), String> {
    for seed in 0..3 {
        let e = detection_grad_error(seed);
        ensure(e < 1e-4, || format!("seed {seed}: relative error {e:e}"))?;
    }
    Ok(())
}

// ---- unknown_refine

fn pair_case() -> impl Strategy<Value = Vec<(BBox, [f64; 4])>> {
    vec((bbox(), prop::array::uniform4(-3.0..3.0f64)), 1..8)
}

fn refine_loss_zero_iff_exact() -> Result<(), String> {
    let cfg = RefineConfig::default();
    check(512, (pair_case(), 0usize..8), |(case, bump)| {
        let pairs: Vec<PseudoPair> = case
            .iter()
            .enumerate()
            .map(|(k, (t, _))| PseudoPair {
                pred_index: k,
                target_box: *t,
                match_iou: 1.0,
            })
            .collect();
        let exact: Vec<BBox> = case.iter().map(|(t, _)| *t).collect();
        prop_assert!(refine_loss(&pairs, &exact, 90.0, &cfg).unwrap().value.abs() <= 1e-7);
        let mut off = exact.clone();
        let k = bump % off.len();
        let d = case[k].1;
        off[k] = BBox::new(
            off[k].x1 + d[0],
            off[k].y1 + d[1],
            off[k].x2 + d[2].abs() + 0.5,
            off[k].y2 + d[3],
        );
        let v = refine_loss(&pairs, &off, 90.0, &cfg).unwrap().value;
        prop_assert!(v > 1e-7);
        let jittered: Vec<BBox> = case
            .iter()
            .map(|(t, d)| BBox::new(t.x1 + d[0], t.y1 + d[1], t.x2 + d[2], t.y2 + d[3]))
            .collect();
        prop_assert!(refine_loss(&pairs, &jittered, 90.0, &cfg).unwrap().value >= 0.0);
        Ok(())
    })
}

fn instance(b: BBox, objectness: f64, cell: Option<usize>) -> Instance {
    Instance {
        bbox: b,
        objectness,
        label: Label::Unknown,
        embedding: vec![1.0, 0.0],
        cell,
    }
}

/// Detections jittered around every object, plus some clutter.
fn noisy_detections(scene: &owd::synthdata::Scene, rng: &mut ChaCha8Rng) -> Vec<Instance> {
    let mut out: Vec<Instance> = scene
        .records
        .iter()
        .map(|r| {
            let j: [f64; 4] = std::array::from_fn(|_| rng.random_range(-4.0..4.0));
            let b = r.bbox;
            instance(
                BBox::new(b.x1 + j[0], b.y1 + j[1], b.x2 + j[2], b.y2 + j[3]),
                rng.random_range(0.0..1.0),
                None,
            )
        })
        .collect();
    for _ in 0..4 {
        out.push(instance(
            super::random_box(64.0, rng),
            rng.random_range(0.0..1.0),
            None,
        ));
    }
    out
}

fn targets_avoid_known_boxes() -> Result<(), String> {
    let spec = SceneSpec::default();
    let cfg = RefineConfig {
        tau_obj: 0.0,
        tau_iou: 0.1,
        ..RefineConfig::default()
    };
    let scenes = generate_scenes(11, 0, 40, &spec).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut seen = 0;
    for scene in scenes {
        let s = Sample::new(scene, &spec.roster, &SegmenterConfig::default(), None);
        let known = s.known_boxes();
        let dets = noisy_detections(&s.scene, &mut rng);
        let cand = select_unknown_candidates(&dets, &known, &cfg);
        for &c in &cand {
            ensure(
                known
                    .iter()
                    .all(|g| iou(&dets[c].bbox, g) < KNOWN_OVERLAP_IOU),
                || "candidate overlaps a known box".into(),
            )?;
        }
        for p in build_pseudo_targets(&dets, &cand, &s.masks, &cfg).pairs {
            seen += 1;
            ensure(known.iter().all(|g| iou(&p.target_box, g) <= 0.5), || {
                format!("target {:?} overlaps a known box", p.target_box)
            })?;
        }
    }
    ensure(seen > 20, || format!("only {seen} pairs exercised"))
}

fn pairs_grow_as_tau_iou_shrinks() -> Result<(), String> {
    let spec = SceneSpec::default();
    let scenes = generate_scenes(12, 0, 30, &spec).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for scene in scenes {
        let dets = noisy_detections(&scene, &mut rng);
        let masks: Vec<BinaryMask> = scene.records.iter().map(|r| r.mask.clone()).collect();
        let all: Vec<usize> = (0..dets.len()).collect();
        let mut prev = 0;
        for step in (0..=20).rev() {
            let cfg = RefineConfig {
                tau_iou: step as f64 / 20.0,
                ..RefineConfig::default()
            };
            let n = build_pseudo_targets(&dets, &all, &masks, &cfg).pairs.len();
            ensure(n >= prev, || {
                format!(
                    "scene {}: {n} pairs at tau_iou {} after {prev}",
                    scene.image_id, cfg.tau_iou
                )
            })?;
            prev = n;
        }
    }
    Ok(())
}

fn unmatched_candidates_get_no_gradient() -> Result<(), String> {
    let spec = SceneSpec::default();
    for seed in 0..6u64 {
        let scene = generate_scene(seed, &spec).map_err(|e| e.to_string())?;
        let net = Network::new(open_detector(), seed).unwrap();
        let (out, _) = net.forward(&scene.image.to_float()).unwrap();
        let dets = decode(&out, &net.config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let paired: Vec<usize> = (0..dets.len()).filter(|_| rng.random_bool(0.3)).collect();
        let pairs: Vec<PseudoPair> = paired
            .iter()
            .map(|&i| PseudoPair {
                pred_index: i,
                target_box: super::random_box(64.0, &mut rng),
                match_iou: 0.5,
            })
            .collect();
        let (_, g) = refine_loss_dense(&pairs, &dets, &out, &RefineConfig::default())
            .map_err(|e| e.to_string())?;
        let (_, wf) = out.grid();
        let paired_cells: Vec<usize> = paired.iter().map(|&i| dets[i].cell.unwrap()).collect();
        for (i, d) in dets.iter().enumerate() {
            let cell = d.cell.unwrap();
            if paired_cells.contains(&cell) {
                continue;
            }
            let (r, c) = (cell / wf, cell % wf);
            ensure((0..4).all(|k| g.box_offsets[[r, c, k]] == 0.0), || {
                format!("unmatched instance {i} received gradient")
            })?;
        }
        let mut rest = g.clone();
        rest.box_offsets.fill(0.0);
        ensure(rest.is_zero(), || {
            "refine gradient leaked outside box offsets".into()
        })?;
    }
    Ok(())
}

// ---- embed_transfer

fn embeddings(n: std::ops::Range<usize>, d: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    vec(vec(-1.0..1.0f64, d), n).prop_map(|v| {
        v.into_iter()
            .map(|e| {
                if e.iter().all(|x| x.abs() < 1e-3) {
                    vec![1.0; e.len()]
                } else {
                    unit(&e)
                }
            })
            .collect()
    })
}

fn shift_rows(m: &SimilarityMatrix, shifts: &[f64]) -> SimilarityMatrix {
    let mut data = m.data.clone();
    for i in 0..m.n {
        for j in 0..m.n {
            if i != j {
                data[i * m.n + j] += shifts[i];
            }
        }
    }
    SimilarityMatrix {
        n: m.n,
        role: m.role,
        data,
    }
}

fn transfer_zero_iff_structure_matches() -> Result<(), String> {
    let case = (
        embeddings(3..12, 5),
        embeddings(3..12, 7),
        vec(-2.0..2.0f64, 12),
        0usize..144,
    );
    check(256, case, |(te, se, shifts, at)| {
        let n = te.len().min(se.len());
        let t = similarity_matrix(&te[..n], SimilarityRole::Teacher);
        let s = similarity_matrix(&se[..n], SimilarityRole::Student);
        for kind in [LossKind::RowKl, LossKind::MatrixMse] {
            let cfg = TransferConfig {
                loss_kind: kind,
                temperature: 0.5,
                ..TransferConfig::default()
            };
            prop_assert!(transfer_loss(&t, &s, &cfg).unwrap().value >= 0.0);
            prop_assert!(transfer_loss(&t, &t, &cfg).unwrap().value <= 1e-7);
            // the largest off-diagonal entry of one row moved
            let i = at % n;
            let j = (0..n)
                .filter(|&j| j != i)
                .max_by(|&a, &b| t.get(i, a).total_cmp(&t.get(i, b)))
                .unwrap();
            let mut moved = t.clone();
            moved.data[i * n + j] += 0.3;
            prop_assert!(transfer_loss(&t, &moved, &cfg).unwrap().value > 1e-7);
        }
        // equal row distributions under row-KL even though the entries differ
        let cfg = TransferConfig {
            loss_kind: LossKind::RowKl,
            ..TransferConfig::default()
        };
        prop_assert!(
            transfer_loss(&t, &shift_rows(&t, &shifts), &cfg)
                .unwrap()
                .value
                <= 1e-7
        );
        Ok(())
    })
}

fn random_rotation(d: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut q: Vec<Vec<f64>> = Vec::with_capacity(d);
    while q.len() < d {
        let mut v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        for u in &q {
            let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= dot * b);
        }
        if v.iter().map(|x| x * x).sum::<f64>() > 1e-6 {
            q.push(unit(&v));
        }
    }
    q
}

fn transfer_rotation_invariant() -> Result<(), String> {
    check(
        256,
        (embeddings(2..12, 6), embeddings(2..12, 4), any::<u64>()),
        |(se, te, seed)| {
            let n = se.len().min(te.len());
            let q = random_rotation(6, &mut ChaCha8Rng::seed_from_u64(seed));
            let rotated: Vec<Vec<f64>> = se[..n]
                .iter()
                .map(|e| {
                    (0..6)
                        .map(|k| q[k].iter().zip(e).map(|(a, b)| a * b).sum())
                        .collect()
                })
                .collect();
            let s = similarity_matrix(&se[..n], SimilarityRole::Student);
            let r = similarity_matrix(&rotated, SimilarityRole::Student);
            for (a, b) in s.data.iter().zip(&r.data) {
                prop_assert!((a - b).abs() < 1e-12);
            }
            let t = similarity_matrix(&te[..n], SimilarityRole::Teacher);
            for kind in [LossKind::RowKl, LossKind::MatrixMse] {
                let cfg = TransferConfig {
                    loss_kind: kind,
                    ..TransferConfig::default()
                };
                let (a, b) = (
                    transfer_loss(&t, &s, &cfg).unwrap().value,
                    transfer_loss(&t, &r, &cfg).unwrap().value,
                );
                prop_assert!((a - b).abs() < 1e-10, "{:?}: {} vs {}", kind, a, b);
            }
            Ok(())
        },
    )
}

/// The teacher is an oracle with no parameters: gradients exist only for the
/// student's tensors, and training leaves the stored teacher features intact.
fn teacher_gets_no_gradient() -> Result<(), String> {
    let mut cfg = tiny_train_config();
    cfg.enable_transfer = true;
    let data = TrainData::prepare(&cfg).map_err(|e| e.to_string())?;
    let teacher =
        OracleTeacher::new(&data.roster, cfg.teacher.clone()).map_err(|e| e.to_string())?;
    let before: Vec<_> = data.train.iter().map(|s| s.teacher.clone()).collect();
    let mut net = Network::new(cfg.detector.clone(), cfg.seed).unwrap();
    let mut opt = Optimizer::new(cfg.optimizer.clone(), &net.params);
    let batch: Vec<&Sample> = data.train.iter().collect();
    let active = Active {
        refine: false,
        transfer: true,
    };
    let (b, g) = batch_gradient(&net, &batch, &cfg, active).map_err(|e| e.to_string())?;
    ensure(b.transfer_instances > 0, || "no transfer instances".into())?;
    g.check_layout(&cfg.detector).map_err(|e| e.to_string())?;
    for _ in 0..3 {
        train_step(&mut net, &mut opt, &batch, &cfg, active, 0.05).map_err(|e| e.to_string())?;
    }
    for (s, t) in data.train.iter().zip(&before) {
        ensure(s.teacher == *t, || {
            "teacher features changed during training".into()
        })?;
        ensure(
            s.teacher.as_ref() == Some(&teacher.feature_map(&s.scene)),
            || "teacher features drifted from the oracle".into(),
        )?;
    }
    Ok(())
}

fn row_kl_teacher_shift_invariant() -> Result<(), String> {
    check(
        256,
        (
            embeddings(3..12, 5),
            embeddings(3..12, 5),
            vec(-3.0..3.0f64, 12),
        ),
        |(te, se, shifts)| {
            let n = te.len().min(se.len());
            let t = similarity_matrix(&te[..n], SimilarityRole::Teacher);
            let s = similarity_matrix(&se[..n], SimilarityRole::Student);
            let cfg = TransferConfig::default();
            let a = transfer_loss(&t, &s, &cfg).unwrap();
            let b = transfer_loss(&shift_rows(&t, &shifts), &s, &cfg).unwrap();
            prop_assert!((a.value - b.value).abs() < 1e-10);
            for (x, y) in a.grad.iter().zip(&b.grad) {
                prop_assert!((x - y).abs() < 1e-10);
            }
            Ok(())
        },
    )
}

// ---- synthdata

pub fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                out.insert(
                    p.strip_prefix(root).unwrap().to_path_buf(),
                    fs::read(&p).unwrap(),
                );
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}

fn synthdata_byte_deterministic() -> Result<(), String> {
    let spec = SceneSpec::default();
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut snaps = Vec::new();
    for k in 0..2 {
        let scenes = generate_scenes(21, 0, 6, &spec).map_err(|e| e.to_string())?;
        let dir = tmp.path().join(format!("d{k}"));
        serialize_dataset(
            &Dataset {
                roster: spec.roster.clone(),
                scenes,
            },
            &dir,
        )
        .map_err(|e| e.to_string())?;
        snaps.push(snapshot(&dir));
    }
    ensure(snaps[0] == snaps[1] && !snaps[0].is_empty(), || {
        "dataset bytes differ between runs".into()
    })?;
    let seq = |s| generate_sequence(s, &spec, 5).unwrap();
    ensure(seq(3) == seq(3), || "sequence differs between runs".into())
}

fn unknowns_in_images_not_in_targets() -> Result<(), String> {
    let spec = SceneSpec::default();
    let roster = &spec.roster;
    let mut unknown_pixels = 0;
    for scene in generate_scenes(31, 0, 60, &spec).map_err(|e| e.to_string())? {
        let s = Sample::new(scene, roster, &SegmenterConfig::default(), None);
        let known: Vec<BBox> = s
            .scene
            .records
            .iter()
            .filter(|r| r.split == Split::Known)
            .map(|r| r.bbox)
            .collect();
        ensure(s.known_gt.len() == known.len(), || {
            "training targets are not exactly the known objects".into()
        })?;
        let targets = assign_targets(&s.known_gt, (8, 8), 8);
        for (bx, class) in &s.known_gt {
            ensure(*class < roster.num_known() && known.contains(bx), || {
                format!("target {bx:?} is not a known object")
            })?;
        }
        ensure(
            targets
                .positives()
                .all(|(_, _, t)| t.class < roster.num_known()),
            || "unknown class in targets".into(),
        )?;
        // every unknown object has pixels that no later object paints over
        for (k, r) in s
            .scene
            .records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.split == Split::Unknown)
        {
            let visible = (0..64)
                .flat_map(|y| (0..64).map(move |x| (y, x)))
                .filter(|&(y, x)| {
                    r.mask.get(y, x) && s.scene.records[k + 1..].iter().all(|o| !o.mask.get(y, x))
                })
                .count();
            ensure(visible > 0, || format!("unknown object {k} is invisible"))?;
            unknown_pixels += visible;
        }
    }
    ensure(unknown_pixels > 0, || "no unknown objects drawn".into())
}

fn track_ids_consistent() -> Result<(), String> {
    let spec = SceneSpec::default();
    for seed in 0..20 {
        let frames = generate_sequence(seed, &spec, 25).map_err(|e| e.to_string())?;
        let mut first: BTreeMap<u64, (u32, BBox)> = BTreeMap::new();
        let mut last: BTreeMap<u64, BBox> = BTreeMap::new();
        for f in &frames {
            for r in &f.records {
                let id = r.track_id.ok_or("sequence record without track id")?;
                let (cat, b0) = *first.entry(id).or_insert((r.category, r.bbox));
                ensure(cat == r.category, || format!("track {id} changed category"))?;
                ensure(
                    (r.bbox.width() - b0.width()).abs() < 1e-12
                        && (r.bbox.height() - b0.height()).abs() < 1e-12,
                    || format!("track {id} changed size"),
                )?;
                if let Some(p) = last.insert(id, r.bbox) {
                    let step = (r.bbox.x1 - p.x1).abs().max((r.bbox.y1 - p.y1).abs());
                    ensure(step <= DEFAULT_MAX_SPEED + 1.0, || {
                        format!("track {id} jumped {step} px")
                    })?;
                }
            }
        }
    }
    Ok(())
}

// ---- evaluation

fn known_pred(b: BBox, score: f64, class: usize) -> Instance {
    Instance {
        bbox: b,
        objectness: score,
        label: Label::Known(class),
        embedding: vec![1.0],
        cell: None,
    }
}

fn gt(b: BBox, class: Option<usize>) -> GtObject {
    GtObject {
        bbox: b,
        category: class.map_or(9, |c| c as u32),
        class,
        split: if class.is_some() {
            Split::Known
        } else {
            Split::Unknown
        },
    }
}

fn small_box() -> impl Strategy<Value = BBox> {
    (0.0..30.0f64, 0.0..30.0f64, 2.0..10.0f64, 2.0..10.0f64)
        .prop_map(|(x, y, w, h)| BBox::new(x, y, x + w, y + h))
}

fn ap_monotone() -> Result<(), String> {
    let case = (
        vec(small_box(), 0..6),
        vec((small_box(), 0.0..1.0f64), 0..10),
        45.0..50.0f64,
        45.0..50.0f64,
    );
    check(512, case, |(gts, preds, x, y)| {
        // the extra object sits where no prediction reaches
        let lone = BBox::new(x, y, x + 8.0, y + 8.0);
        let mut g: Vec<GtObject> = gts.iter().map(|b| gt(*b, Some(0))).collect();
        g.push(gt(lone, Some(0)));
        let p: Vec<Instance> = preds.iter().map(|(b, s)| known_pred(*b, *s, 0)).collect();
        let before = average_precision(&[DetectionResult::new(p.clone(), g.clone())], 1, 0.5).map;
        let mut q = p;
        q.push(known_pred(lone, 2.0, 0));
        let after = average_precision(&[DetectionResult::new(q, g)], 1, 0.5).map;
        prop_assert!(after >= before - 1e-12, "{} -> {}", before, after);
        Ok(())
    })
}

fn u_recall_monotone() -> Result<(), String> {
    let case = (
        vec(small_box(), 1..6),
        vec((small_box(), 0.0..1.0f64), 0..12),
    );
    check(512, case, |(gts, preds)| {
        let g: Vec<GtObject> = gts.iter().map(|b| gt(*b, None)).collect();
        let mut p: Vec<Instance> = preds.iter().map(|(b, s)| instance(*b, *s, None)).collect();
        p.sort_by(|a, b| b.objectness.total_cmp(&a.objectness));
        let mut prev = 0.0;
        for k in 0..=p.len() {
            let r = unknown_recall(
                &[DetectionResult::new(p[..k].to_vec(), g.clone())],
                0.5,
                false,
            );
            prop_assert!(r >= prev);
            prev = r;
        }
        let full = [DetectionResult::new(p, g)];
        let mut prev = f64::INFINITY;
        for t in 1..=10 {
            let r = unknown_recall(&full, t as f64 / 10.0, false);
            prop_assert!(r <= prev);
            prev = r;
        }
        Ok(())
    })
}

fn nmi_permutation_invariant() -> Result<(), String> {
    let case = (
        vec((0usize..5, 0u32..4), 1..60),
        Just((0..5usize).collect::<Vec<_>>()).prop_shuffle(),
    );
    check(512, case, |(pairs, perm)| {
        let a: Vec<usize> = pairs.iter().map(|p| p.0).collect();
        let b: Vec<u32> = pairs.iter().map(|p| p.1).collect();
        let relabelled: Vec<usize> = a.iter().map(|&x| perm[x]).collect();
        prop_assert!((nmi(&a, &b) - nmi(&relabelled, &b)).abs() < 1e-12);
        Ok(())
    })
}

fn metrics_deterministic() -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let x: Vec<Vec<f64>> = (0..80)
        .map(|i| {
            vec![
                (i % 4) as f64 + rng.random_range(-0.6..0.6),
                rng.random_range(-1.0..1.0),
            ]
        })
        .collect();
    let labels: Vec<u32> = (0..80).map(|i| (i % 4) as u32).collect();
    let a = clustering_quality(&x, &labels, 4, 5).map_err(|e| e.to_string())?;
    let b = clustering_quality(&x, &labels, 4, 5).map_err(|e| e.to_string())?;
    ensure(a == b, || "clustering differs under one seed".into())?;
    let spec = SceneSpec::default();
    let scenes = generate_scenes(42, 0, 10, &spec).map_err(|e| e.to_string())?;
    let net = Network::new(open_detector(), 42).unwrap();
    let results = || owd::evaluation::detect_scenes(&net, &scenes, &spec.roster).unwrap();
    let (r1, r2) = (results(), results());
    ensure(r1 == r2, || "detections differ between passes".into())?;
    ensure(
        average_precision(&r1, 4, 0.5) == average_precision(&r2, 4, 0.5),
        || "AP differs".into(),
    )?;
    ensure(
        unknown_recall(&r1, 0.5, true).to_bits() == unknown_recall(&r2, 0.5, true).to_bits(),
        || "U-Recall differs".into(),
    )
}

// ---- tracker

fn frames() -> impl Strategy<Value = Vec<Vec<Instance>>> {
    let d = (
        0.0..40.0f64,
        0.0..40.0f64,
        vec(-1.0..1.0f64, 3),
        0.0..1.0f64,
    )
        .prop_map(|(x, y, e, s)| {
            let e = if e.iter().all(|v| v.abs() < 1e-6) {
                vec![1.0, 0.0, 0.0]
            } else {
                unit(&e)
            };
            Instance {
                bbox: BBox::new(x, y, x + 12.0, y + 12.0),
                objectness: s,
                label: Label::Unknown,
                embedding: e,
                cell: None,
            }
        });
    vec(vec(d, 0..6), 1..10)
}

fn ids_never_reused() -> Result<(), String> {
    check(256, frames(), |frames| {
        let cfg = TrackerConfig {
            max_misses: 0,
            birth_score: 0.0,
            ..TrackerConfig::default()
        };
        let run = run_detections(&frames, &cfg).unwrap();
        let mut born: Vec<u64> = run
            .log
            .iter()
            .flat_map(|l| l.born.iter().map(|b| b.track_id))
            .collect();
        let n = born.len();
        born.sort();
        born.dedup();
        prop_assert_eq!(born.len(), n);
        Ok(())
    })
}

fn ema_embeddings_unit_norm() -> Result<(), String> {
    check(256, (frames(), 0.01..1.0f64), |(frames, alpha)| {
        let cfg = TrackerConfig {
            ema_alpha: alpha,
            iou_gate: 0.0,
            sim_thresh: 0.0,
            ..TrackerConfig::default()
        };
        let mut t = Tracker::new(cfg).unwrap();
        for f in &frames {
            t.step(f);
            for tr in t.tracks() {
                let n = tr.embedding.iter().map(|x| x * x).sum::<f64>().sqrt();
                prop_assert!((n - 1.0).abs() <= 1e-5);
            }
        }
        Ok(())
    })
}

fn impossible_threshold_births_all() -> Result<(), String> {
    check(256, frames(), |frames| {
        let cfg = TrackerConfig {
            sim_thresh: 1.0 + 1e-9,
            birth_score: 0.0,
            ..TrackerConfig::default()
        };
        let run = run_detections(&frames, &cfg).unwrap();
        for (l, f) in run.log.iter().zip(&frames) {
            prop_assert!(l.matched.is_empty());
            prop_assert_eq!(l.born.len(), f.len());
        }
        Ok(())
    })
}

fn association_order_invariant() -> Result<(), String> {
    check(256, (frames(), any::<u64>()), |(frames, seed)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shuffled: Vec<Vec<Instance>> = frames
            .iter()
            .map(|f| {
                let mut f = f.clone();
                f.shuffle(&mut rng);
                f
            })
            .collect();
        let cfg = TrackerConfig {
            birth_score: 0.3,
            iou_gate: 0.0,
            sim_thresh: 0.2,
            ..TrackerConfig::default()
        };
        prop_assert_eq!(
            run_detections(&frames, &cfg).unwrap(),
            run_detections(&shuffled, &cfg).unwrap()
        );
        Ok(())
    })
}

// ---- trainer

pub fn tiny_train_config() -> TrainConfig {
    let mut cfg = TrainConfig {
        epochs: 2,
        warmup_epochs: 1,
        batch_size: 4,
        ..TrainConfig::default()
    };
    cfg.data.train_scenes = 8;
    cfg.data.val_scenes = 4;
    cfg.data.test_scenes = 4;
    cfg.detector.channels = vec![8, 8, 8];
    cfg.detector.embed_dim = 8;
    cfg.refine.tau_obj = 0.0;
    cfg.detector.score_thresh = 0.0;
    cfg
}

fn breakdown_finite_non_negative() -> Result<(), String> {
    let mut cfg = tiny_train_config();
    cfg.enable_refine = true;
    cfg.enable_transfer = true;
    let data = TrainData::prepare(&cfg).map_err(|e| e.to_string())?;
    for seed in 0..3 {
        let net = Network::new(cfg.detector.clone(), seed).unwrap();
        for s in &data.train {
            let (b, _) = batch_gradient(
                &net,
                &[s],
                &cfg,
                Active {
                    refine: true,
                    transfer: true,
                },
            )
            .map_err(|e| e.to_string())?;
            for v in [b.detection, b.refine, b.transfer, b.total] {
                ensure(v.is_finite() && v >= 0.0, || format!("breakdown {b:?}"))?;
            }
        }
    }
    Ok(())
}

/// A disabled module contributes exactly what a zero weight would: the same
/// parameter update to the last bit, and a zero loss term.
fn disabled_module_has_no_effect() -> Result<(), String> {
    let mut cfg = tiny_train_config();
    cfg.transfer.mask_proposals = true;
    // random-init boxes rarely reach the default pairing IoU
    cfg.refine.tau_iou = 0.0;
    let data = TrainData::prepare(&{
        let mut c = cfg.clone();
        c.enable_transfer = true;
        c
    })
    .map_err(|e| e.to_string())?;
    let batch: Vec<&Sample> = data.train.iter().collect();
    let step = |cfg: &TrainConfig,
                active: Active|
     -> Result<(owd::trainer::LossBreakdown, Vec<f64>), String> {
        let mut net = Network::new(cfg.detector.clone(), 5).unwrap();
        let mut opt = Optimizer::new(cfg.optimizer.clone(), &net.params);
        let b =
            train_step(&mut net, &mut opt, &batch, cfg, active, 0.05).map_err(|e| e.to_string())?;
        Ok((b, net.params.values().collect()))
    };
    let on = Active {
        refine: true,
        transfer: true,
    };
    for module in ["refine", "transfer"] {
        let off = if module == "refine" {
            Active {
                refine: false,
                ..on
            }
        } else {
            Active {
                transfer: false,
                ..on
            }
        };
        let mut zero = cfg.clone();
        if module == "refine" {
            zero.lambda_refine = 0.0;
        } else {
            zero.lambda_transfer = 0.0;
        }
        let (b_off, p_off) = step(&cfg, off)?;
        let (_, p_zero) = step(&zero, on)?;
        let (b_on, p_on) = step(&cfg, on)?;
        let term = |b: &owd::trainer::LossBreakdown| {
            if module == "refine" {
                b.refine
            } else {
                b.transfer
            }
        };
        ensure(term(&b_off) == 0.0, || {
            format!("{module} term {} while disabled", term(&b_off))
        })?;
        ensure(term(&b_on) > 0.0, || {
            format!("{module} term inactive while enabled")
        })?;
        ensure(p_off == p_zero, || {
            format!("disabling {module} differs from a zero weight")
        })?;
        ensure(p_off != p_on, || {
            format!("{module} has no effect while enabled")
        })?;
    }
    Ok(())
}

fn single_thread_deterministic() -> Result<(), String> {
    let mut cfg = tiny_train_config();
    cfg.enable_refine = true;
    cfg.enable_transfer = true;
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .map_err(|e| e.to_string())?;
    let mut snaps = Vec::new();
    for k in 0..2 {
        let dir = tmp.path().join(format!("r{k}"));
        pool.install(|| train(&cfg, &dir))
            .map_err(|e| e.to_string())?;
        snaps.push(snapshot(&dir));
    }
    let dir = tmp.path().join("pooled");
    train(&cfg, &dir).map_err(|e| e.to_string())?;
    snaps.push(snapshot(&dir));
    ensure(snaps[0] == snaps[1], || {
        "single-threaded runs differ".into()
    })?;
    ensure(snaps[0] == snaps[2], || {
        "thread count changed the outputs".into()
    })
}

// ---- cli

pub fn owd(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_owd"))
        .args(args)
        .env("OWD_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Result<(), String> {
    let o = owd(args);
    ensure(o.status.success(), || {
        format!("{args:?} failed: {}", String::from_utf8_lossy(&o.stderr))
    })
}

fn cli_commands_idempotent() -> Result<(), String> {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let p = |s: &str| tmp.path().join(s).to_string_lossy().into_owned();
    let cfg = p("tiny.toml");
    let mut c = tiny_train_config();
    c.tracking.sequences = 2;
    c.tracking.length = 6;
    fs::write(&cfg, c.to_toml()).map_err(|e| e.to_string())?;
    let (data, run, ckpt) = (p("data"), p("run"), p("run/best.ckpt"));
    let commands: Vec<(String, Vec<String>)> = vec![
        (
            data.clone(),
            vec!["gen-data", "--config", &cfg, "--out", &data],
        ),
        (run.clone(), vec!["train", "--config", &cfg, "--out", &run]),
        (
            p("det"),
            vec![
                "eval-detect",
                "--config",
                &cfg,
                "--checkpoint",
                &ckpt,
                "--dataset",
                &data,
                "--out",
                &p("det"),
            ],
        ),
        (
            p("emb"),
            vec![
                "eval-embed",
                "--config",
                &cfg,
                "--checkpoint",
                &ckpt,
                "--out",
                &p("emb"),
            ],
        ),
        (
            p("disc"),
            vec![
                "discover",
                "--config",
                &cfg,
                "--checkpoint",
                &ckpt,
                "--out",
                &p("disc"),
            ],
        ),
        (
            p("trk"),
            vec!["track", "--config", &cfg, "--out", &p("trk")],
        ),
        (p("rep"), vec!["report", "--out", &p("rep"), &run]),
    ]
    .into_iter()
    .map(|(d, a)| (d, a.into_iter().map(String::from).collect()))
    .collect();
    for (dir, args) in &commands {
        let args: Vec<&str> = args.iter().map(String::as_str).collect();
        ok(&args)?;
        let first = snapshot(Path::new(dir));
        ok(&args)?;
        ensure(first == snapshot(Path::new(dir)), || {
            format!("{} rewrote {dir} differently", args[0])
        })?;
    }
    Ok(())
}

fn cli_exit_code_reflects_success() -> Result<(), String> {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let p = |s: &str| tmp.path().join(s).to_string_lossy().into_owned();
    fs::write(p("bad.toml"), "epochs = \"ten\"\n").map_err(|e| e.to_string())?;
    fs::write(p("unknown.toml"), "no_such_key = 1\n").map_err(|e| e.to_string())?;
    fs::create_dir_all(p("empty")).map_err(|e| e.to_string())?;
    let failing: Vec<Vec<String>> = vec![
        vec!["train".into(), "--bogus".into()],
        vec![
            "train".into(),
            "--config".into(),
            p("bad.toml"),
            "--out".into(),
            p("o1"),
        ],
        vec![
            "gen-data".into(),
            "--config".into(),
            p("unknown.toml"),
            "--out".into(),
            p("o2"),
        ],
        vec![
            "eval-detect".into(),
            "--checkpoint".into(),
            p("missing.ckpt"),
            "--out".into(),
            p("o3"),
        ],
        vec!["report".into(), "--out".into(), p("o4"), p("empty")],
        vec!["frobnicate".into()],
    ];
    for args in &failing {
        let a: Vec<&str> = args.iter().map(String::as_str).collect();
        let o = owd(&a);
        ensure(!o.status.success(), || format!("{a:?} exited 0"))?;
        ensure(String::from_utf8_lossy(&o.stderr).contains("error"), || {
            format!("{a:?} printed no error")
        })?;
    }
    ok(&["--help"])?;
    let out = p("gen");
    let mut c = tiny_train_config();
    c.data.train_scenes = 2;
    fs::write(p("tiny.toml"), c.to_toml()).map_err(|e| e.to_string())?;
    let o = owd(&["gen-data", "--config", &p("tiny.toml"), "--out", &out]);
    ensure(o.status.success(), || "gen-data failed".into())?;
    ensure(Path::new(&out).join("manifest.json").exists(), || {
        "success without a manifest".into()
    })
}
