mod common;

use proptest::prelude::*;

use common::*;
use sonoseg::prompting::*;
use sonoseg::{BinaryMask, Label};

fn mask_from_bits(h: usize, w: usize, bits: &[bool]) -> BinaryMask {
    BinaryMask::from_fn(h, w, |y, x| bits[y * w + x])
}

fn ellipse(h: usize, w: usize, cx: f64, cy: f64, a: f64, b: f64) -> BinaryMask {
    BinaryMask::from_fn(h, w, |y, x| {
        ((x as f64 - cx) / a).powi(2) + ((y as f64 - cy) / b).powi(2) <= 1.0
    })
}

proptest! {
    #[test]
    fn clicks_land_in_the_matching_error_region(
        pred_bits in prop::collection::vec(any::<bool>(), 144),
        gt_bits in prop::collection::vec(any::<bool>(), 144),
        seed in any::<u64>(),
        eval in any::<bool>(),
    ) {
        let pred = mask_from_bits(12, 12, &pred_bits);
        let gt = mask_from_bits(12, 12, &gt_bits);
        let mode = if eval { Mode::Eval } else { Mode::Train };
        let mut r = rng(seed);
        match next_click(&pred, &gt, mode, &mut r).unwrap() {
            Click::Done => prop_assert_eq!(pred, gt),
            Click::Point(p) => {
                let (g, q) = (gt.get(p.y, p.x), pred.get(p.y, p.x));
                match p.label {
                    Label::Positive => prop_assert!(g && !q),
                    Label::Negative => prop_assert!(q && !g),
                }
            }
        }
    }

    #[test]
    fn first_prompt_respects_the_jitter_bound(
        cx in 10.0f64..54.0, cy in 10.0f64..54.0,
        a in 3.0f64..10.0, b in 3.0f64..10.0,
        jitter in 0.0f64..0.4,
        seed in any::<u64>(),
    ) {
        let gt = ellipse(64, 64, cx, cy, a, b);
        prop_assume!(gt.count() > 0);
        let cfg = SamplerConfig { jitter_fraction: jitter, ..SamplerConfig::default() };
        let (x0, y0, x1, y1) = tight_bbox(&gt);
        let diag = (((x1 - x0).pow(2) + (y1 - y0).pow(2)) as f64).sqrt();
        let (mx, my) = centroid(&gt);
        let mut r = rng(seed);
        for _ in 0..8 {
            let p = initial_prompt(&gt, &cfg, Mode::Train, &mut r).unwrap();
            if let Some(pt) = p.points.first() {
                let d = ((pt.x as f64 - mx).powi(2) + (pt.y as f64 - my).powi(2)).sqrt();
                prop_assert!(d <= jitter * diag + 1.0, "{} > {}", d, jitter * diag + 1.0);
                prop_assert!(gt.get(pt.y, pt.x));
                prop_assert_eq!(pt.label, Label::Positive);
            }
            if let Some(bx) = p.bbox {
                prop_assert!(bx.x0 <= x0 && bx.y0 <= y0 && bx.x1 >= x1 && bx.y1 >= y1);
                prop_assert!(bx.x1 <= 64 && bx.y1 <= 64);
                prop_assert!(bx.width() as f64 <= (x1 - x0) as f64 * (1.0 + 2.0 * jitter) + 1.0);
            }
        }
    }
}

#[test]
fn eval_first_click_is_the_foreground_pixel_nearest_the_centroid() {
    // An annulus: the centroid itself is background.
    let gt = BinaryMask::from_fn(21, 21, |y, x| {
        let d = ((x as f64 - 10.0).powi(2) + (y as f64 - 10.0).powi(2)).sqrt();
        (4.0..=7.0).contains(&d)
    });
    let p = initial_prompt(&gt, &SamplerConfig::default(), Mode::Eval, &mut rng(0)).unwrap();
    let pt = p.points[0];
    assert!(gt.get(pt.y, pt.x));
    let d = ((pt.x as f64 - 10.0).powi(2) + (pt.y as f64 - 10.0).powi(2)).sqrt();
    assert!((d - 4.0).abs() < 1e-9, "{d}");
}

#[test]
fn eval_corrective_click_is_deepest_point_of_largest_error() {
    let gt = rect_mask(20, 20, 2, 2, 17, 17);
    // Prediction misses a 7x7 block and a 2x2 block.
    let mut pred = gt.clone();
    for y in 9..16 {
        for x in 9..16 {
            pred.set(y, x, false);
        }
    }
    for y in 3..5 {
        for x in 3..5 {
            pred.set(y, x, false);
        }
    }
    match next_click(&pred, &gt, Mode::Eval, &mut rng(1)).unwrap() {
        Click::Point(p) => assert_eq!((p.x, p.y, p.label), (12, 12, Label::Positive)),
        Click::Done => panic!("errors remain"),
    }
}

#[test]
fn sessions_are_reproducible_and_stop_at_budget() {
    let gt = ellipse(32, 32, 16.0, 16.0, 8.0, 6.0);
    // A predictor that only ever marks the clicked pixels.
    let predict = |p: &sonoseg::PromptSet| -> sonoseg::Result<BinaryMask> {
        let mut m = BinaryMask::empty(32, 32);
        for pt in &p.points {
            m.set(pt.y, pt.x, pt.label == Label::Positive);
        }
        Ok(m)
    };
    let cfg = SamplerConfig::default();
    let run = |seed| {
        let mut r = session_rng(seed, "img/obj1");
        simulate_session(predict, "img/obj1", &gt, &SessionOptions::eval(6), &cfg, &mut r).unwrap()
    };
    let (a, pa, ma) = run(4);
    let (b, pb, mb) = run(4);
    assert_eq!((a.clone(), pa, ma), (b, pb, mb));
    assert_eq!(a.len(), 6);
    assert_eq!(a.prompts.len(), 6);
    for (k, d) in a.dsc_per_click.iter().enumerate() {
        let expected = 2.0 * (k + 1) as f64 / (gt.count() + k + 1) as f64;
        assert_eq!(*d, expected);
    }
}

#[test]
fn empty_ground_truth_is_rejected() {
    let gt = BinaryMask::empty(8, 8);
    assert!(matches!(
        initial_prompt(&gt, &SamplerConfig::default(), Mode::Eval, &mut rng(0)),
        Err(sonoseg::Error::EmptyGroundTruth)
    ));
}
