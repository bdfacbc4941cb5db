//! Small worked examples, checked through the public API.

mod common;

use std::collections::BTreeMap;

use common::*;
use refseg::backend::{Backend, BackendRequest, Blob, MaskMode, SyntheticBackend, SyntheticScene};
use refseg::eval::fixtures;
use refseg::eval::overlay::{compose_overlay, BLANK_GRAY};
use refseg::eval::{aggregate_metrics, iou, EvalRecord, ImageMeta};
use refseg::heatmap::{
    argmax_coords, bilinear_upsample, center_sigmoid, compose_gradcam, mean_over_tokens, threshold_drop_mask,
    BinaryMask, Heatmap, Tensor3,
};
use refseg::igrs::{
    relevance_score, request_tokens, run_refinement, soft_itm, update_heatmap, update_mask, RefinementConfig,
};
use refseg::parser::{detect_positional, Parser, Pos};
use refseg::pwem::{aggregate, global_augment, local_augment, TokenSaliencyStack};
use refseg::rle::MaskProposal;
use refseg::select::{connected_components, filter_proposals, score_mask, select, Connectivity, FilterReason};

fn hm(h: usize, w: usize, v: &[f64]) -> Heatmap {
    Heatmap::new(h, w, v.to_vec()).unwrap()
}

fn t3(t: usize, h: usize, w: usize, v: &[f64]) -> Tensor3 {
    Tensor3::new(t, h, w, v.to_vec()).unwrap()
}

fn mask(h: usize, w: usize, bits: &[u8]) -> BinaryMask {
    BinaryMask::new(h, w, bits.iter().map(|b| *b == 1).collect()).unwrap()
}

fn approx(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(b) {
        assert!((x - y).abs() <= tol, "{a:?} vs {b:?}");
    }
}

// ----------------------------------------------------------------- heatmap

#[test]
fn gradcam_clamps_negative_gradients() {
    assert_eq!(compose_gradcam(&t3(1, 1, 1, &[0.5]), &t3(1, 1, 1, &[-1.0])).unwrap().values(), &[0.0]);
    assert_eq!(compose_gradcam(&t3(1, 1, 1, &[0.5]), &t3(1, 1, 1, &[2.0])).unwrap().values(), &[1.0]);
    let mut r = rng(3);
    let (a, g) = (rand_tensor(&mut r, 3, 4, 4, 0.0, 1.0), rand_tensor(&mut r, 3, 4, 4, -1.0, 1.0));
    approx(compose_gradcam(&a, &g).unwrap().values(), &gradcam_loop(&a, &g), 1e-12);
}

#[test]
fn token_mean_examples() {
    let one = t3(1, 2, 2, &[0.1, 0.2, 0.3, 0.4]);
    assert_eq!(mean_over_tokens(&one).values(), one.values());
    assert_eq!(mean_over_tokens(&t3(2, 1, 1, &[0.0, 2.0])).values(), &[1.0]);
    let s = rand_tensor(&mut rng(5), 5, 3, 3, -1.0, 1.0);
    approx(mean_over_tokens(&s).values(), &token_mean_loop(&s), 1e-6);
}

#[test]
fn centered_sigmoid_examples() {
    assert!(center_sigmoid(&Heatmap::filled(3, 3, 7.0).unwrap()).values().iter().all(|v| *v == 0.5));
    approx(center_sigmoid(&hm(1, 2, &[-1.0, 1.0])).values(), &[0.2689414213699951, 0.7310585786300049], 1e-12);
}

#[test]
fn drop_mask_examples() {
    assert!(threshold_drop_mask(&Heatmap::filled(2, 2, 3.0).unwrap(), 0.5).unwrap().is_empty());
    assert_eq!(threshold_drop_mask(&hm(1, 2, &[-3.0, 3.0]), 0.5).unwrap(), mask(1, 2, &[1, 0]));
    let m = rand_heatmap(&mut rng(9), 6, 6, -2.0, 2.0);
    let drop = threshold_drop_mask(&m, 0.5).unwrap();
    let mean = m.mean();
    for (v, keep) in m.values().iter().zip(drop.bits()) {
        assert_eq!(*keep, v - mean < 0.0);
    }
}

#[test]
fn upsample_examples() {
    let up = bilinear_upsample(&hm(1, 1, &[0.3]), 5, 4).unwrap();
    assert!(up.values().iter().all(|v| *v == 0.3));
    let corners = hm(2, 2, &[0.0, 1.0, 2.0, 5.0]);
    let up = bilinear_upsample(&corners, 3, 3).unwrap();
    assert!((up.get(1, 1) - 2.0).abs() < 1e-12);
    approx(up.values(), &bilinear_loop(&corners, 3, 3), 1e-12);
}

#[test]
fn argmax_examples() {
    let mut peaks = argmax_coords(&hm(2, 2, &[1.0, 2.0, 2.0, 0.0]), 0.0);
    peaks.sort_unstable();
    assert_eq!(peaks, vec![(0, 1), (1, 0)]);
    assert_eq!(argmax_coords(&Heatmap::filled(2, 3, 1.0).unwrap(), 1e-9).len(), 6);
    let m = rand_heatmap(&mut rng(11), 5, 5, 0.0, 1.0);
    assert_eq!(argmax_coords(&m, 1e-9).len(), 1);
    assert_eq!(argmax_coords(&m, 1e-9).into_iter().collect::<std::collections::BTreeSet<_>>(), peaks_loop(&m, 1e-9));
}

// ------------------------------------------------------------------ parser

fn tagged(text: &str) -> Vec<(String, Pos)> {
    Parser::default()
        .tokenize_and_tag(text)
        .unwrap()
        .into_iter()
        .skip(1)
        .map(|t| (t.surface, t.pos))
        .collect()
}

fn surfaces_of(text: &str, pick: impl Fn(&refseg::parser::ParsedExpression) -> Vec<usize>) -> Vec<String> {
    let p = Parser::default().parse(text).unwrap();
    pick(&p).into_iter().map(|i| p.tokens[i].surface.clone()).collect()
}

#[test]
fn tagging_examples() {
    let s = |w: &str| w.to_string();
    assert_eq!(
        tagged("partially damaged car"),
        vec![(s("partially"), Pos::Other), (s("damaged"), Pos::Verb), (s("car"), Pos::Noun)]
    );
    assert_eq!(tagged("the left bike"), vec![(s("the"), Pos::Det), (s("left"), Pos::Adj), (s("bike"), Pos::Noun)]);
    assert_eq!(tagged("42"), vec![(s("42"), Pos::Num)]);
    assert!(Parser::default().tokenize_and_tag("x").unwrap()[0].is_sentinel());
}

#[test]
fn effective_token_examples() {
    let eff = |t: &str| surfaces_of(t, |p| p.effective.clone());
    assert_eq!(eff("partially damaged car"), ["[CLS]", "damaged", "car"]);
    assert_eq!(eff("the of a"), ["[CLS]"]);
    assert_eq!(eff("two red cars running"), ["[CLS]", "two", "red", "cars", "running"]);
}

#[test]
fn primary_word_examples() {
    let main = |t: &str| surfaces_of(t, |p| vec![p.primary])[0].clone();
    assert_eq!(main("partially damaged car"), "car");
    assert_eq!(main("man in a blue shirt holding a racket"), "man");
    assert_eq!(main("red"), "red");
}

#[test]
fn positional_examples() {
    let pos = |t: &str| detect_positional(&Parser::default().tokenize_and_tag(t).unwrap());
    assert!(pos("the left bike"));
    assert!(!pos("partially damaged car"));
    assert!(pos("man next to the dog"));
}

// -------------------------------------------------------------------- pwem

#[test]
fn local_slot_examples() {
    let same = TokenSaliencyStack::new(
        t3(2, 1, 2, &[0.3, 0.7, 0.3, 0.7]),
        t3(2, 1, 2, &[1.0, 1.0, 1.0, 1.0]),
        vec![0, 1],
    )
    .unwrap();
    assert!(local_augment(&same, &index_sets(vec![0, 1], 0), 1e-8).unwrap().values().iter().all(|v| *v == 0.0));

    let stack = TokenSaliencyStack::new(
        t3(2, 2, 2, &[1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0]),
        t3(2, 2, 2, &[1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0]),
        vec![0, 1],
    )
    .unwrap();
    let slot = local_augment(&stack, &index_sets(vec![0, 1], 0), 1e-8).unwrap();
    approx(slot.values(), &[std::f64::consts::FRAC_1_SQRT_2, 0.0, 0.0, 0.0], 1e-12);

    let mut r = rng(21);
    let (a, g) = (rand_tensor(&mut r, 4, 3, 3, 0.0, 1.0), rand_tensor(&mut r, 4, 3, 3, -1.0, 1.0));
    let stack = TokenSaliencyStack::new(a.clone(), g.clone(), (0..4).collect()).unwrap();
    let slots = local_augment(&stack, &index_sets(vec![0, 1, 2, 3], 2), 1e-8).unwrap();
    approx(slots.values(), &local_loop(&a, &g, 2, &[0, 1, 3], 1e-8).concat(), 1e-6);
}

#[test]
fn global_row_counts() {
    let mut r = rng(22);
    let (a, g) = (rand_tensor(&mut r, 3, 2, 2, 0.0, 1.0), rand_tensor(&mut r, 3, 2, 2, -1.0, 1.0));
    let stack = TokenSaliencyStack::new(a.clone(), g.clone(), vec![0, 1, 2]).unwrap();
    let hc = compose_gradcam(&a, &g).unwrap();
    // the sentinel is a context token, so W = {sentinel, main, other} gives N_c = 2
    let glob = global_augment(&stack, &index_sets(vec![0, 1, 2], 1)).unwrap();
    assert_eq!(glob.tokens(), 5);
    for k in [1, 3, 4] {
        assert_eq!(glob.row(k), hc.row(1));
    }
    assert_eq!(glob.row(0), hc.row(0));
    assert_eq!(glob.row(2), hc.row(2));
    let solo = global_augment(&stack, &index_sets(vec![2], 2)).unwrap();
    assert_eq!(solo.tokens(), 1);
    assert_eq!(solo.row(0), hc.row(2));
}

#[test]
fn aggregate_examples() {
    let row = t3(1, 1, 3, &[0.2, 0.4, 0.6]);
    assert_eq!(aggregate(None, &row).unwrap().values(), row.values());
    let zeros = Tensor3::zeros(1, 1, 3).unwrap();
    approx(aggregate(Some(&zeros), &row).unwrap().values(), &[0.1, 0.2, 0.3], 1e-15);
}

// -------------------------------------------------------------------- igrs

#[test]
fn update_examples() {
    let zero = Heatmap::zeros(2, 2).unwrap();
    let out = update_heatmap(&zero, &Heatmap::filled(2, 2, 4.0).unwrap(), 0.8).unwrap();
    approx(out.values(), &[0.1; 4], 1e-15);
    let prev = hm(1, 3, &[0.1, 0.5, 0.9]);
    assert_eq!(update_heatmap(&prev, &hm(1, 3, &[3.0, -2.0, 0.0]), 1.0).unwrap(), prev);

    let constant = Heatmap::filled(2, 2, 1.0).unwrap();
    assert!(update_mask(&BinaryMask::ones(2, 2), &constant, 0.5).unwrap().is_empty());
    let any = hm(2, 2, &[0.0, 9.0, -3.0, 1.0]);
    assert!(update_mask(&BinaryMask::zeros(2, 2), &any, 0.2).unwrap().is_empty());

    let mut r = rng(31);
    let mut m = BinaryMask::ones(5, 5);
    let mut zeros_before = 0;
    for _ in 0..3 {
        m = update_mask(&m, &rand_heatmap(&mut r, 5, 5, 0.0, 1.0), 0.5).unwrap();
        let zeros = m.bits().iter().filter(|b| !**b).count();
        assert!(zeros >= zeros_before);
        zeros_before = zeros;
    }
}

#[test]
fn relevance_and_soft_score_examples() {
    assert_eq!(relevance_score(&Heatmap::zeros(3, 3).unwrap()), 1.0);
    assert_eq!(relevance_score(&Heatmap::filled(3, 3, 1.0).unwrap()), 0.0);
    assert_eq!(relevance_score(&hm(2, 2, &[1.0, 0.0, 0.0, 1.0])), 0.5);
    assert_eq!(soft_itm(0.9, 1.0), 0.9);
    assert_eq!(soft_itm(0.37, 0.0), 0.0);
    assert!((soft_itm(0.8, 0.5) - 0.4).abs() < 1e-15);
}

fn constant_backend(tokens: usize, itm: f64) -> ConstantBackend {
    let mut r = rng(41);
    ConstantBackend {
        attention: rand_tensor(&mut r, tokens, 4, 6, 0.0, 0.05),
        gradients: rand_tensor(&mut r, tokens, 4, 6, -1.0, 1.0),
        itm,
        image_size: (24, 16),
    }
}

#[test]
fn single_pass_is_a_scaled_sigmoid() {
    let parsed = Parser::default().parse("the red car").unwrap();
    let mut b = constant_backend(request_tokens(&parsed).len(), 0.6);
    let cfg = RefinementConfig { nu: 1, ..Default::default() };
    let state = run_refinement(&mut b, &parsed, "img", &cfg).unwrap();
    assert_eq!((state.backend_calls, state.t, state.stopped_early), (1, 1, false));
    let expect: Vec<f64> = center_sigmoid(&state.trace[0].heat).values().iter().map(|v| 0.2 * v).collect();
    approx(state.refined.values(), &expect, 1e-15);
}

#[test]
fn constant_score_stops_at_the_second_pass() {
    let parsed = Parser::default().parse("the red car").unwrap();
    let mut b = constant_backend(request_tokens(&parsed).len(), 0.9);
    let state = run_refinement(&mut b, &parsed, "img", &RefinementConfig::default()).unwrap();
    assert!(state.stopped_early);
    assert_eq!((state.t, state.backend_calls), (1, 2));
    assert_eq!(state.scores, vec![0.9]);
    assert!(state.trace[1].score < 0.9);
    let cfg = RefinementConfig { nu: 1, ..Default::default() };
    let once = run_refinement(&mut b, &parsed, "img", &cfg).unwrap();
    assert_eq!((once.refined, once.cum_mask), (state.refined, state.cum_mask));
}

#[test]
fn two_blob_fixture_moves_its_peak() {
    let mut b = SyntheticBackend::new([fixtures::selfcorrect_scene()]).unwrap();
    let parsed = Parser::default().parse(fixtures::SELFCORRECT_EXPRESSION).unwrap();
    let state = run_refinement(&mut b, &parsed, fixtures::SELFCORRECT_ID, &RefinementConfig::default()).unwrap();
    // latent grid is 8 x 16: columns below 8 are the left (distractor) half
    let col = |t: usize| argmax_coords(&state.trace[t].heat, 1e-9)[0].0;
    assert!(col(0) < 8, "first pass peaks at column {}", col(0));
    assert!(col(1) >= 8, "second pass peaks at column {}", col(1));
}

// ----------------------------------------------------------------- backend

fn one_blob() -> SyntheticScene {
    SyntheticScene {
        image: "one".into(),
        image_size: [40, 40],
        latent: [10, 10],
        blobs: vec![Blob {
            center: [22.0, 14.0],
            sigma: 4.0,
            salience: 0.8,
            tags: vec!["ball".into()],
            relations: Vec::new(),
            distractor_bias: 1.0,
        }],
    }
}

fn ball_request(mask: BinaryMask) -> BackendRequest {
    BackendRequest {
        image: "one".into(),
        tokens: ["[CLS]", "there", "is", "a", "ball"].map(String::from).to_vec(),
        mask,
        mask_mode: MaskMode::Feature,
    }
}

#[test]
fn single_blob_attention_is_its_normalised_gaussian() {
    let mut b = SyntheticBackend::new([one_blob()]).unwrap();
    let resp = b.forward(&ball_request(BinaryMask::ones(10, 10))).unwrap();
    let gauss: Vec<f64> = (0..100)
        .map(|i| {
            let (x, y) = ((i % 10) as f64 * 4.0 + 2.0, (i / 10) as f64 * 4.0 + 2.0);
            (-((x - 22.0).powi(2) + (y - 14.0).powi(2)) / 32.0).exp()
        })
        .collect();
    let total: f64 = gauss.iter().sum();
    approx(resp.attention.row(4), &gauss.iter().map(|g| g / total).collect::<Vec<_>>(), 1e-12);
    assert_eq!(resp.itm, 1.0);
    assert_eq!(b.forward(&ball_request(BinaryMask::ones(10, 10))).unwrap(), resp);

    let none = b.forward(&ball_request(BinaryMask::zeros(10, 10))).unwrap();
    assert!(none.attention.values().iter().all(|v| *v == 0.0));
    assert_eq!(none.itm, 0.0);

    // cells whose centres lie within 3 sigma of the blob
    let support = BinaryMask::from_fn(10, 10, |x, y| {
        let (cx, cy) = (x as f64 * 4.0 + 2.0, y as f64 * 4.0 + 2.0);
        (cx - 22.0).hypot(cy - 14.0) > 12.0
    });
    assert!(b.forward(&ball_request(support)).unwrap().itm < 0.05);
}

#[test]
fn biased_left_blob_wins_until_masked() {
    let mut b = SyntheticBackend::new([fixtures::selfcorrect_scene()]).unwrap();
    let req = |mask| BackendRequest {
        image: fixtures::SELFCORRECT_ID.into(),
        tokens: ["[CLS]", "dog"].map(String::from).to_vec(),
        mask,
        mask_mode: MaskMode::Feature,
    };
    let peak = |resp: refseg::backend::BackendResponse| argmax_coords(&resp.attention.row_map(1), 1e-12)[0].0;
    assert!(peak(b.forward(&req(BinaryMask::ones(8, 16))).unwrap()) < 8);
    assert!(peak(b.forward(&req(BinaryMask::from_fn(8, 16, |x, _| x >= 8))).unwrap()) >= 8);
}

// ---------------------------------------------------------------- selector

fn prop(id: u64, m: BinaryMask) -> MaskProposal {
    MaskProposal { id, mask: m }
}

#[test]
fn component_examples() {
    assert_eq!(connected_components(&BinaryMask::zeros(4, 4), Connectivity::Four), 0);
    let diag = mask(2, 2, &[1, 0, 0, 1]);
    assert_eq!(connected_components(&diag, Connectivity::Four), 2);
    assert_eq!(connected_components(&diag, Connectivity::Eight), 1);
}

#[test]
fn filter_examples() {
    let peak = BinaryMask::from_fn(8, 8, |x, y| (x, y) == (5, 5));
    let (kept, _) = filter_proposals(&[prop(4, peak)], &[(5, 5)], 12, Connectivity::Four);
    assert_eq!(kept, vec![4]);

    let frags = fixtures::selfcorrect_proposals().remove(3);
    assert_eq!(connected_components(&frags.mask, Connectivity::Four), 13);
    let peak_in_frag = (1, 15);
    assert!(frags.mask.get(peak_in_frag.0, peak_in_frag.1));
    let (kept, why) = filter_proposals(&[frags], &[peak_in_frag], 12, Connectivity::Four);
    assert!(kept.is_empty());
    assert_eq!(why[&4], FilterReason::TooFragmented);

    let hole = BinaryMask::from_fn(8, 8, |x, y| (x, y) != (5, 5));
    let (_, why) = filter_proposals(&[prop(9, hole)], &[(5, 5)], 12, Connectivity::Four);
    assert_eq!(why[&9], FilterReason::NoPeakCoverage);
}

#[test]
fn score_and_select_examples() {
    let m = mask(1, 3, &[1, 1, 0]);
    assert_eq!(score_mask(&m, &Heatmap::zeros(1, 3).unwrap()).unwrap(), 1.0);
    assert_eq!(score_mask(&m, &Heatmap::filled(1, 3, 1.0).unwrap()).unwrap(), 2.0);
    assert!((score_mask(&m, &hm(1, 3, &[0.2, 0.8, 0.5])).unwrap() - 1.5).abs() < 1e-15);

    let pick = |pairs: &[(u64, f64)]| select(&pairs.iter().copied().collect::<BTreeMap<_, _>>()).unwrap();
    assert_eq!(pick(&[(3, 1.2)]), 3);
    assert_eq!(pick(&[(1, 1.4), (2, 1.7)]), 2);
    assert_eq!(pick(&[(1, 1.5), (2, 1.5)]), 1);
}

// ----------------------------------------------------------------- metrics

fn record(id: &str, expr: &str, gt: &BinaryMask) -> EvalRecord {
    EvalRecord {
        sample_id: id.into(),
        image: ImageMeta { width: gt.width(), height: gt.height(), path: None, id: None },
        expression: expr.into(),
        proposals: "p.json".into(),
        gt: refseg::rle::Rle::encode(gt),
        split_tags: Vec::new(),
    }
}

#[test]
fn iou_examples() {
    let a = BinaryMask::ones(2, 2);
    assert_eq!(iou(&a, &a).unwrap(), 1.0);
    assert_eq!(iou(&mask(1, 2, &[1, 0]), &mask(1, 2, &[0, 1])).unwrap(), 0.0);
    assert_eq!(iou(&a, &mask(2, 2, &[1, 1, 0, 0])).unwrap(), 0.5);
}

#[test]
fn aggregate_examples_and_empty_buckets() {
    let full = BinaryMask::ones(2, 2);
    let half = mask(2, 2, &[1, 1, 0, 0]);
    let records = vec![
        record("a", "the left cup", &full),
        record("b", "the cup on the right", &half),
        record("c", "cup at the top", &full),
    ];
    let preds: BTreeMap<String, BinaryMask> = [("a", full.clone()), ("b", mask(2, 2, &[0, 0, 1, 1])), ("c", half)]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
    let rep = aggregate_metrics(&records, &preds, &Parser::default()).unwrap();
    assert_eq!(rep.miou, Some(0.5));
    assert_eq!(rep.counts.position, 3);
    assert!(rep.others.is_none());
    assert!(rep.position.is_some());
}

// ----------------------------------------------------------------- overlay

#[test]
fn overlay_extremes() {
    let empty = BinaryMask::zeros(3, 4);
    let gray = compose_overlay(None, &Heatmap::zeros(3, 4).unwrap(), &empty).unwrap();
    assert!(gray.pixels().all(|p| p.0 == [BLANK_GRAY; 3]));
    let red = compose_overlay(None, &Heatmap::filled(3, 4, 1.0).unwrap(), &empty).unwrap();
    assert!(red.pixels().all(|p| p.0 == [255, 0, 0]));
}
